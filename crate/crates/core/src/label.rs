//! Efficiency labels: simulation-relative heuristic score, text-derived need
//! score, and their weighted fusion.

use std::collections::BTreeMap;
use std::sync::OnceLock;

use rayon::prelude::*;
use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::backend::TextBackend;
use crate::domain::{Category, EngineKind, SimulationResult};
use crate::error::{Error, Result};

pub const LAMBDA_PROMPT: &str = "You are a certified home inspector advising on energy retrofits.\n\
Rate the need of replacing or improving the {CATEGORY} of the home described in the inspection note below, \
on a scale from 0 to 1 where 1 means an urgent need and 0 means no need at all.\n\
Inspection note:\n\"\"\"{NOTE}\"\"\"\n\
Respond with only a decimal number between 0 and 1.";

/// Attempts allowed when the backend answers with no number.
pub const TEXT_SCORE_ATTEMPTS: u32 = 2;

fn category_phrase(category: Category) -> &'static str {
    match category {
        Category::Hvac => "HVAC system",
        Category::Insulation => "insulation",
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LabelerConfig {
    pub eta_weight: f64,
    pub lambda_weight: f64,
    /// Multiply μ by 2 so it spans [0, 1].
    pub normalized_mu: bool,
    /// Must contain `{CATEGORY}` and `{NOTE}`.
    pub lambda_prompt: String,
    pub parallelism: usize,
}

impl Default for LabelerConfig {
    fn default() -> Self {
        LabelerConfig {
            eta_weight: 0.80,
            lambda_weight: 0.20,
            normalized_mu: false,
            lambda_prompt: LAMBDA_PROMPT.into(),
            parallelism: 4,
        }
    }
}

impl LabelerConfig {
    pub fn with_weights(mut self, eta_weight: f64, lambda_weight: f64) -> Self {
        self.eta_weight = eta_weight;
        self.lambda_weight = lambda_weight;
        self
    }

    pub fn check(&self) -> Result<()> {
        let ok = |w: f64| w.is_finite() && (0.0..=1.0).contains(&w);
        if !ok(self.eta_weight) || !ok(self.lambda_weight) {
            return Err(Error::Config("labeler weights must lie in [0, 1]".into()));
        }
        if (self.eta_weight + self.lambda_weight - 1.0).abs() > 1e-9 {
            return Err(Error::Config("labeler weights must sum to 1".into()));
        }
        for slot in ["{CATEGORY}", "{NOTE}"] {
            if !self.lambda_prompt.contains(slot) {
                return Err(Error::Config(format!("lambda prompt lacks {slot}")));
            }
        }
        if self.parallelism == 0 {
            return Err(Error::Config("parallelism must be >= 1".into()));
        }
        Ok(())
    }

    pub fn lambda_prompt_for(&self, note: &str, category: Category) -> String {
        self.lambda_prompt
            .replace("{CATEGORY}", category_phrase(category))
            .replace("{NOTE}", note)
    }

    pub fn mu(&self, eta: f64, lambda: f64) -> f64 {
        let mu = combine_weighted(eta, lambda, self.eta_weight, self.lambda_weight);
        if self.normalized_mu {
            mu * 2.0
        } else {
            mu
        }
    }
}

/// η = (α − β) / (γ − β); 0 when the dataset has a single distinct value.
pub fn heuristic_score(alpha: f64, beta: f64, gamma: f64) -> Result<f64> {
    if !(alpha.is_finite() && beta.is_finite() && gamma.is_finite()) {
        return Err(Error::Input("heuristic inputs must be finite".into()));
    }
    if gamma < beta {
        return Err(Error::Input(format!("gamma {gamma} below beta {beta}")));
    }
    if alpha < beta || alpha > gamma {
        return Err(Error::Input(format!("alpha {alpha} outside [{beta}, {gamma}]")));
    }
    if gamma == beta {
        log::warn!("degenerate dataset: all homes share alpha {beta}; eta set to 0");
        return Ok(0.0);
    }
    Ok((alpha - beta) / (gamma - beta))
}

/// Most and least efficient values of the category's measure.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Extremes {
    pub beta: f64,
    pub gamma: f64,
}

impl Extremes {
    pub fn is_degenerate(&self) -> bool {
        self.beta == self.gamma
    }

    pub fn widen(self, alpha: f64) -> Self {
        Extremes {
            beta: self.beta.min(alpha),
            gamma: self.gamma.max(alpha),
        }
    }
}

pub fn dataset_extremes(results: &[SimulationResult], category: Category) -> Result<Extremes> {
    let mut alphas = results.iter().map(|r| r.alpha(category));
    let first = alphas
        .next()
        .ok_or_else(|| Error::Input("cannot take extremes of an empty dataset".into()))?;
    Ok(alphas.fold(
        Extremes {
            beta: first,
            gamma: first,
        },
        Extremes::widen,
    ))
}

fn decimal_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"-?(?:\d+(?:\.\d*)?|\.\d+)").unwrap())
}

/// First decimal in `text`, clamped to [0, 1].
pub fn parse_score(text: &str) -> Option<f64> {
    let v: f64 = decimal_re().find(text)?.as_str().parse().ok()?;
    Some(v.clamp(0.0, 1.0))
}

/// λ: the backend's need rating for `category` given the inspection note.
pub fn text_score(backend: &dyn TextBackend, note: &str, category: Category, config: &LabelerConfig) -> Result<f64> {
    if note.trim().is_empty() {
        return Err(Error::Labeling("inspection note is empty".into()));
    }
    let prompt = config.lambda_prompt_for(note, category);
    let mut last = String::new();
    for _ in 0..TEXT_SCORE_ATTEMPTS {
        last = backend.retry_policy().run(|| backend.generate(&prompt))?;
        if let Some(score) = parse_score(&last) {
            return Ok(score);
        }
    }
    Err(Error::Labeling(format!(
        "no score in {category} rating after {TEXT_SCORE_ATTEMPTS} attempts; last reply {last:?}"
    )))
}

/// μ with the default 0.80/0.20 weights: (0.80·η + 0.20·λ) / 2.
pub fn combine(eta: f64, lambda: f64) -> f64 {
    (0.80 * eta + 0.20 * lambda) / 2.0
}

pub fn combine_weighted(eta: f64, lambda: f64, eta_weight: f64, lambda_weight: f64) -> f64 {
    (eta_weight * eta + lambda_weight * lambda) / 2.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelInput {
    pub id: String,
    pub inspection_note: String,
    pub simulation: SimulationResult,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Scores {
    pub lambda: f64,
    pub eta: f64,
    pub mu: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimulationSummary {
    pub hvac_energy_kwh: f64,
    pub envelope_load_kwh: f64,
    pub engine: EngineKind,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Labels {
    pub hvac: Scores,
    pub insulation: Scores,
}

impl Labels {
    pub fn get(&self, category: Category) -> Scores {
        match category {
            Category::Hvac => self.hvac,
            Category::Insulation => self.insulation,
        }
    }
}

/// One line of the output dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledHome {
    pub id: String,
    pub inspection_note: String,
    pub simulation: SimulationSummary,
    pub labels: Labels,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrorRow {
    pub id: String,
    pub stage: String,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledDataset {
    pub homes: Vec<LabeledHome>,
    pub errors: Vec<ErrorRow>,
    pub extremes: BTreeMap<Category, Extremes>,
    pub warnings: Vec<String>,
}

impl LabeledDataset {
    pub fn to_jsonl(&self) -> String {
        jsonl(&self.homes)
    }

    pub fn errors_jsonl(&self) -> String {
        jsonl(&self.errors)
    }
}

pub fn jsonl<T: Serialize>(rows: &[T]) -> String {
    rows.iter()
        .map(|r| serde_json::to_string(r).expect("row serializes") + "\n")
        .collect()
}

/// Label one home against fixed extremes.
pub fn label_home(
    home: &LabelInput,
    backend: &dyn TextBackend,
    config: &LabelerConfig,
    extremes: &BTreeMap<Category, Extremes>,
) -> Result<LabeledHome> {
    home.simulation.validate().map_err(Error::Labeling)?;
    let score = |category: Category| -> Result<Scores> {
        let ext = extremes[&category];
        let eta = heuristic_score(home.simulation.alpha(category), ext.beta, ext.gamma)?;
        let lambda = text_score(backend, &home.inspection_note, category, config)?;
        Ok(Scores {
            lambda,
            eta,
            mu: config.mu(eta, lambda),
        })
    };
    Ok(LabeledHome {
        id: home.id.clone(),
        inspection_note: home.inspection_note.clone(),
        simulation: SimulationSummary {
            hvac_energy_kwh: home.simulation.hvac_energy_kwh,
            envelope_load_kwh: home.simulation.envelope_load_kwh,
            engine: home.simulation.engine,
        },
        labels: Labels {
            hvac: score(Category::Hvac)?,
            insulation: score(Category::Insulation)?,
        },
    })
}

pub(crate) fn pool(threads: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads.max(1))
        .build()
        .map_err(|e| Error::Config(format!("worker pool: {e}")))
}

/// Label every home. Extremes come from the whole input; per-home failures
/// go to `errors` and the remaining homes keep input order.
pub fn label_dataset(
    homes: &[LabelInput],
    backend: &dyn TextBackend,
    config: &LabelerConfig,
) -> Result<LabeledDataset> {
    if homes.is_empty() {
        return Err(Error::Input("no homes to label".into()));
    }
    config.check()?;
    let valid: Vec<SimulationResult> = homes
        .iter()
        .filter(|h| h.simulation.validate().is_ok())
        .map(|h| h.simulation.clone())
        .collect();
    let mut extremes = BTreeMap::new();
    let mut warnings = Vec::new();
    if !valid.is_empty() {
        for category in Category::ALL {
            let ext = dataset_extremes(&valid, category)?;
            if ext.is_degenerate() {
                warnings.push(format!(
                    "degenerate {category} extremes: every home has alpha {}; eta is 0",
                    ext.beta
                ));
            }
            extremes.insert(category, ext);
        }
    }

    let outcomes: Vec<Result<LabeledHome>> = pool(config.parallelism)?.install(|| {
        homes
            .par_iter()
            .map(|h| label_home(h, backend, config, &extremes))
            .collect()
    });

    let mut labeled = Vec::new();
    let mut errors = Vec::new();
    for (home, outcome) in homes.iter().zip(outcomes) {
        match outcome {
            Ok(l) => labeled.push(l),
            Err(e) => errors.push(ErrorRow {
                id: home.id.clone(),
                stage: "label".into(),
                error: e.to_string(),
            }),
        }
    }
    Ok(LabeledDataset {
        homes: labeled,
        errors,
        extremes,
        warnings,
    })
}
