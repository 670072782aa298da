//! Labeler ablation: vary the inspection note or one simulation input while
//! holding the other fixed, and tabulate μ over repeated trials.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::backend::TextBackend;
use crate::domain::{BuildingFeature, Category, Param, PerformanceParams, SimulationResult};
use crate::error::{Error, Result};
use crate::geometry::{rectangle, SQ_FT_PER_SQ_M};
use crate::label::{heuristic_score, text_score, Extremes, LabelerConfig};
use crate::simulate::{run_surrogate, Climate};

/// A labelled inspection note: (id, efficiency level, text).
pub type Note = (&'static str, &'static str, &'static str);

pub const HVAC_NOTES: [Note; 5] = [
    ("HVAC1", "Very Inefficient", "There is an older HVAC unit installed, with signs of rust on the exterior."),
    ("HVAC2", "Inefficient", "The HVAC system appears to be in working condition but is an older standard-efficiency model."),
    ("HVAC3", "Moderate", "The home uses window AC units rather than a central HVAC system."),
    ("HVAC4", "Efficient", "The HVAC system was recently replaced with a standard high-efficiency model and is expected to operate efficiently."),
    ("HVAC5", "Very Efficient", "A state-of-the-art HVAC system with smart thermostats and variable-speed compressors was recently installed, maximizing energy efficiency."),
];

pub const INSULATION_NOTES: [Note; 5] = [
    ("INS1", "Very Inefficient", "Attic insulation is minimal, with exposed joists visible throughout, causing significant heat loss."),
    ("INS2", "Inefficient", "No signs of added insulation were observed in the basement ceiling, suggesting potential energy inefficiency."),
    ("INS3", "Moderate", "Walls appear to be adequately insulated based on construction year, though no upgrades were observed."),
    ("INS4", "Efficient", "Blown-in insulation is present in the attic to a depth of approximately 10 inches, providing good thermal resistance."),
    ("INS5", "Very Efficient", "High-performance spray foam insulation was installed throughout the walls, attic, and basement, providing maximum energy efficiency."),
];

/// Held constant while simulation inputs vary.
pub const NEUTRAL_NOTE: &str = "The home has two stories with vinyl siding and a shingled roof. Windows appear to be single-hung with no visible damage. The HVAC system is located on the first floor near the utility room. Insulation levels in the attic are unknown. Doors are wood-core with standard weather stripping.";

/// The ten default notes for text ablation, HVAC first.
pub fn default_text_notes() -> Vec<(String, String)> {
    HVAC_NOTES
        .iter()
        .chain(&INSULATION_NOTES)
        .map(|(id, _, text)| (id.to_string(), text.to_string()))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum AblationVariable {
    #[serde(rename = "WALLR")]
    WallR,
    #[serde(rename = "ROOFR")]
    RoofR,
    #[serde(rename = "HVACH")]
    HvacH,
    #[serde(rename = "HVACC")]
    HvacC,
}

impl AblationVariable {
    pub const ALL: [AblationVariable; 4] = [
        AblationVariable::WallR,
        AblationVariable::RoofR,
        AblationVariable::HvacH,
        AblationVariable::HvacC,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AblationVariable::WallR => "WALLR",
            AblationVariable::RoofR => "ROOFR",
            AblationVariable::HvacH => "HVACH",
            AblationVariable::HvacC => "HVACC",
        }
    }

    pub fn param(self) -> Param {
        match self {
            AblationVariable::WallR => Param::WallR,
            AblationVariable::RoofR => Param::RoofR,
            AblationVariable::HvacH => Param::HeatingCop,
            AblationVariable::HvacC => Param::CoolingCop,
        }
    }

    /// Index 1..=5 values, least to most efficient.
    pub fn values(self) -> [f64; 5] {
        match self {
            AblationVariable::WallR => [4.0, 7.0, 13.0, 20.0, 30.0],
            AblationVariable::RoofR => [10.0, 20.0, 30.0, 40.0, 50.0],
            AblationVariable::HvacH => [0.7, 0.8, 0.9, 0.95, 1.0],
            AblationVariable::HvacC => [1.0, 2.0, 3.0, 3.5, 4.0],
        }
    }

    /// The category whose label this variable drives.
    pub fn category(self) -> Category {
        match self {
            AblationVariable::WallR | AblationVariable::RoofR => Category::Insulation,
            AblationVariable::HvacH | AblationVariable::HvacC => Category::Hvac,
        }
    }
}

impl fmt::Display for AblationVariable {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AblationVariable {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        AblationVariable::ALL
            .into_iter()
            .find(|v| v.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| {
                Error::Input(format!(
                    "unknown ablation variable {s:?}; expected WALLR, ROOFR, HVACH or HVACC"
                ))
            })
    }
}

/// The fixed building and climate the simulation-side tests run on.
#[derive(Debug, Clone, PartialEq)]
pub struct AblationSetup {
    pub reference: BuildingFeature,
    pub climate: Climate,
}

impl Default for AblationSetup {
    fn default() -> Self {
        let footprint = rectangle((-75.22, 40.69), 10.0, 12.0);
        AblationSetup {
            reference: BuildingFeature {
                name: "Ablation Reference".into(),
                floor_area: 2.0 * 120.0 * SQ_FT_PER_SQ_M,
                building_type: "Single family".into(),
                inspection_note: NEUTRAL_NOTE.into(),
                number_of_stories: Some(2.0),
                params: PerformanceParams::DEFAULTS,
                footprint,
            },
            climate: Climate::default(),
        }
    }
}

impl AblationSetup {
    pub fn simulate(&self, params: PerformanceParams) -> Result<SimulationResult> {
        let mut f = self.reference.clone();
        f.params = params;
        run_surrogate(&f, &self.climate)
    }

    /// Defaults with one variable set to its index value (1..=5).
    pub fn params_at(&self, variable: AblationVariable, index: usize) -> Result<PerformanceParams> {
        let values = variable.values();
        let v = index
            .checked_sub(1)
            .and_then(|i| values.get(i))
            .ok_or_else(|| Error::Input(format!("ablation index {index} outside 1..=5")))?;
        Ok(PerformanceParams::DEFAULTS.with(variable.param(), *v))
    }

    /// Reference building with every variable at its worst, then its best, value.
    fn envelope(&self) -> Result<[SimulationResult; 2]> {
        let at = |index: usize| {
            AblationVariable::ALL
                .iter()
                .fold(PerformanceParams::DEFAULTS, |p, v| p.with(v.param(), v.values()[index]))
        };
        Ok([self.simulate(at(0))?, self.simulate(at(4))?])
    }

    /// β/γ per category spanning the worst and best variants plus `extra`.
    pub fn extremes(&self, extra: &[SimulationResult]) -> Result<BTreeMap<Category, Extremes>> {
        let env = self.envelope()?;
        Ok(Category::ALL
            .into_iter()
            .map(|c| {
                let ext = env.iter().chain(extra).map(|s| s.alpha(c)).fold(
                    Extremes {
                        beta: f64::INFINITY,
                        gamma: f64::NEG_INFINITY,
                    },
                    Extremes::widen,
                );
                (c, ext)
            })
            .collect())
    }
}

/// Labeler under test.
#[derive(Clone, Copy)]
pub struct Labeler<'a> {
    pub backend: &'a dyn TextBackend,
    pub config: &'a LabelerConfig,
}

impl Labeler<'_> {
    fn mu(&self, note: &str, sim: &SimulationResult, category: Category, ext: &Extremes) -> Result<f64> {
        let eta = heuristic_score(sim.alpha(category), ext.beta, ext.gamma)?;
        let lambda = text_score(self.backend, note, category, self.config)?;
        Ok(self.config.mu(eta, lambda))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrialStats {
    pub mean: f64,
    /// Sample standard deviation; 0 for a single trial.
    pub sd: f64,
    pub n: usize,
}

pub fn trial_stats(values: &[f64]) -> Option<TrialStats> {
    let n = values.len();
    if n == 0 {
        return None;
    }
    if values.iter().all(|v| *v == values[0]) {
        return Some(TrialStats {
            mean: values[0],
            sd: 0.0,
            n,
        });
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    let sd = if n == 1 {
        0.0
    } else {
        (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
    };
    Some(TrialStats { mean, sd, n })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub label: String,
    pub value: Option<f64>,
    /// μ statistics per category; absent when every trial failed.
    pub mu: BTreeMap<Category, Option<TrialStats>>,
    pub errors: Vec<String>,
}

impl AblationRow {
    pub fn mean(&self, category: Category) -> Option<f64> {
        self.mu.get(&category).copied().flatten().map(|s| s.mean)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub trials: usize,
    pub extremes: BTreeMap<Category, Extremes>,
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = vec!["row".to_string(), "value".to_string()];
        for c in Category::ALL {
            header.push(format!("{c}_mu_mean"));
            header.push(format!("{c}_mu_sd"));
        }
        header.extend(["trials".to_string(), "error".to_string()]);
        w.write_record(&header)?;
        for row in &self.rows {
            let mut rec = vec![
                row.label.clone(),
                row.value.map(|v| format!("{v:.6}")).unwrap_or_default(),
            ];
            for c in Category::ALL {
                match row.mu.get(&c).copied().flatten() {
                    Some(s) => {
                        rec.push(format!("{:.6}", s.mean));
                        rec.push(format!("{:.6}", s.sd));
                    }
                    None => rec.extend([String::new(), String::new()]),
                }
            }
            rec.push(self.trials.to_string());
            rec.push(row.errors.join("; "));
            w.write_record(&rec)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Stats(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("utf-8 csv"))
    }
}

fn check_trials(trials: usize) -> Result<()> {
    if trials == 0 {
        return Err(Error::Input("trials must be >= 1".into()));
    }
    Ok(())
}

fn run_row(
    labeler: Labeler<'_>,
    label: String,
    value: Option<f64>,
    note: &str,
    sim: &SimulationResult,
    extremes: &BTreeMap<Category, Extremes>,
    trials: usize,
) -> AblationRow {
    let mut mu = BTreeMap::new();
    let mut errors = Vec::new();
    for c in Category::ALL {
        let mut values = Vec::with_capacity(trials);
        for _ in 0..trials {
            match labeler.mu(note, sim, c, &extremes[&c]) {
                Ok(v) => values.push(v),
                Err(e) => errors.push(format!("{c}: {e}")),
            }
        }
        mu.insert(c, trial_stats(&values));
    }
    errors.dedup();
    AblationRow {
        label,
        value,
        mu,
        errors,
    }
}

/// Vary the note; the simulation stays fixed.
pub fn ablation_text(
    labeler: Labeler<'_>,
    notes: &[(String, String)],
    fixed_sim: &SimulationResult,
    trials: usize,
    setup: &AblationSetup,
) -> Result<AblationTable> {
    check_trials(trials)?;
    if notes.is_empty() {
        return Err(Error::Input("no notes to ablate".into()));
    }
    fixed_sim.validate().map_err(Error::Input)?;
    let extremes = setup.extremes(std::slice::from_ref(fixed_sim))?;
    let rows = notes
        .iter()
        .map(|(label, note)| run_row(labeler, label.clone(), None, note, fixed_sim, &extremes, trials))
        .collect();
    Ok(AblationTable { trials, extremes, rows })
}

/// Vary one simulation input over its five index values; the note stays fixed.
pub fn ablation_sim(
    labeler: Labeler<'_>,
    fixed_note: &str,
    variable: AblationVariable,
    trials: usize,
    setup: &AblationSetup,
) -> Result<AblationTable> {
    check_trials(trials)?;
    let sims = (1..=5)
        .map(|i| setup.simulate(setup.params_at(variable, i)?))
        .collect::<Result<Vec<_>>>()?;
    let extremes = setup.extremes(&sims)?;
    let rows = sims
        .iter()
        .zip(variable.values())
        .enumerate()
        .map(|(i, (sim, v))| {
            run_row(
                labeler,
                format!("{variable}{}", i + 1),
                Some(v),
                fixed_note,
                sim,
                &extremes,
                trials,
            )
        })
        .collect();
    Ok(AblationTable { trials, extremes, rows })
}

/// Two notes and two simulations, each ordered (efficient, inefficient).
#[derive(Debug, Clone, PartialEq)]
pub struct CombinedInputs {
    pub notes: [(String, String); 2],
    pub sims: [(String, SimulationResult); 2],
}

impl CombinedInputs {
    /// Best and worst notes for the category, with the matching lever at
    /// its best and worst index: HVACC for HVAC, ROOFR for insulation.
    pub fn defaults(category: Category, setup: &AblationSetup) -> Result<Self> {
        let (notes, variable) = match category {
            Category::Hvac => (&HVAC_NOTES, AblationVariable::HvacC),
            Category::Insulation => (&INSULATION_NOTES, AblationVariable::RoofR),
        };
        let note = |n: &Note| (n.0.to_string(), n.2.to_string());
        let sim = |i: usize| -> Result<(String, SimulationResult)> {
            Ok((format!("{variable}{i}"), setup.simulate(setup.params_at(variable, i)?)?))
        };
        Ok(CombinedInputs {
            notes: [note(&notes[4]), note(&notes[0])],
            sims: [sim(5)?, sim(1)?],
        })
    }
}

/// Every note paired with every simulation: rows are
/// (eff, eff), (eff, ineff), (ineff, eff), (ineff, ineff) as note/sim.
pub fn combined_variation(
    labeler: Labeler<'_>,
    inputs: &CombinedInputs,
    trials: usize,
    setup: &AblationSetup,
) -> Result<AblationTable> {
    check_trials(trials)?;
    let sims: Vec<SimulationResult> = inputs.sims.iter().map(|(_, s)| s.clone()).collect();
    for s in &sims {
        s.validate().map_err(Error::Input)?;
    }
    let extremes = setup.extremes(&sims)?;
    let mut rows = Vec::with_capacity(4);
    for (note_label, note) in &inputs.notes {
        for (sim_label, sim) in &inputs.sims {
            rows.push(run_row(
                labeler,
                format!("{note_label}/{sim_label}"),
                None,
                note,
                sim,
                &extremes,
                trials,
            ));
        }
    }
    Ok(AblationTable { trials, extremes, rows })
}
