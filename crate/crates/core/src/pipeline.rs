//! The five stages as file-to-file steps, and the end-to-end run.
//!
//! Work directory layout:
//!
//! ```text
//! records/        <id>.json + copied images     (ingest)
//! descriptions/   <id>.json, null if no images  (describe)
//! features/       <id>.geojson                  (generate)
//! simulations/    <id>.json                     (simulate)
//! labels.jsonl, labels.errors.jsonl             (label)
//! reports/        <stage>.json, <stage>.errors.jsonl
//! manifest.json                                 (pipeline)
//! ```
//!
//! Each stage reads its upstream directories from `input` and writes its own
//! to `output`; using one directory for both chains the stages.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use rayon::prelude::*;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::config::{Backends, Config, EngineConfig};
use crate::domain::{BuildingFeature, Category, HomeRecord, ImageDescription, SimulationResult};
use crate::error::{Error, Result};
use crate::genjson::{build_generation_prompt, generate_feature, plausibility_warning};
use crate::ingest::load_home_records;
use crate::label::{jsonl, label_dataset, pool, ErrorRow, Extremes, LabelInput};
use crate::simulate::{render_idf, run_external, run_surrogate};
use crate::vision::describe_home;

pub const RECORDS_DIR: &str = "records";
pub const DESCRIPTIONS_DIR: &str = "descriptions";
pub const FEATURES_DIR: &str = "features";
pub const SIMULATIONS_DIR: &str = "simulations";
pub const REPORTS_DIR: &str = "reports";
pub const LABELS_FILE: &str = "labels.jsonl";
pub const LABEL_ERRORS_FILE: &str = "labels.errors.jsonl";
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Ingest,
    Describe,
    Generate,
    Simulate,
    Label,
}

impl Stage {
    pub const ALL: [Stage; 5] = [
        Stage::Ingest,
        Stage::Describe,
        Stage::Generate,
        Stage::Simulate,
        Stage::Label,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Ingest => "ingest",
            Stage::Describe => "describe",
            Stage::Generate => "generate",
            Stage::Simulate => "simulate",
            Stage::Label => "label",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Stage::ALL
            .into_iter()
            .find(|st| st.as_str() == s)
            .ok_or_else(|| Error::Input(format!("unknown stage {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageReport {
    pub stage: Stage,
    /// Homes the stage attempted.
    pub processed: usize,
    /// Homes that produced an artifact.
    pub succeeded: usize,
    pub errors: Vec<ErrorRow>,
    pub warnings: Vec<String>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub extremes: BTreeMap<Category, Extremes>,
    #[serde(skip)]
    pub elapsed_ms: u128,
}

impl StageReport {
    fn new(stage: Stage) -> Self {
        StageReport {
            stage,
            processed: 0,
            succeeded: 0,
            errors: Vec::new(),
            warnings: Vec::new(),
            extremes: BTreeMap::new(),
            elapsed_ms: 0,
        }
    }

    fn fail(&mut self, id: &str, err: impl fmt::Display) {
        self.errors.push(ErrorRow {
            id: id.to_string(),
            stage: self.stage.as_str().into(),
            error: err.to_string(),
        });
    }
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

/// Empty (or create) a stage's output directory.
fn fresh_dir(path: &Path) -> Result<()> {
    if path.exists() {
        fs::remove_dir_all(path).map_err(|e| Error::io(path, e))?;
    }
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

fn upstream(input: &Path, name: &str, stage: Stage) -> Result<PathBuf> {
    let dir = input.join(name);
    if !dir.is_dir() {
        return Err(Error::Upstream(format!(
            "{stage} needs {} from the previous stage",
            dir.display()
        )));
    }
    Ok(dir)
}

/// `(stem, parsed)` for every `*.ext` file in `dir`, sorted by stem.
fn read_artifacts<T: DeserializeOwned>(dir: &Path, ext: &str) -> Result<Vec<(String, Result<T>)>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.extension().and_then(|e| e.to_str()) != Some(ext) {
            continue;
        }
        let Some(stem) = path.file_stem().and_then(|s| s.to_str()) else {
            continue;
        };
        let parsed = fs::read_to_string(&path)
            .map_err(|e| Error::io(&path, e))
            .and_then(|t| serde_json::from_str(&t).map_err(|e| Error::Parse(format!("{}: {e}", path.display()))));
        out.push((stem.to_string(), parsed));
    }
    out.sort_by(|a, b| a.0.cmp(&b.0));
    Ok(out)
}

fn write_report(output: &Path, report: &StageReport) -> Result<()> {
    let dir = output.join(REPORTS_DIR);
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let mut text = serde_json::to_string_pretty(report)?;
    text.push('\n');
    write(&dir.join(format!("{}.json", report.stage)), text)?;
    write(
        &dir.join(format!("{}.errors.jsonl", report.stage)),
        jsonl(&report.errors),
    )
}

/// Run one stage.
pub fn run_stage(
    stage: Stage,
    input: &Path,
    output: &Path,
    config: &Config,
    backends: &Backends,
) -> Result<StageReport> {
    let start = Instant::now();
    fs::create_dir_all(output).map_err(|e| Error::io(output, e))?;
    let mut report = match stage {
        Stage::Ingest => ingest_stage(input, output)?,
        Stage::Describe => describe_stage(input, output, config, backends)?,
        Stage::Generate => generate_stage(input, output, config, backends)?,
        Stage::Simulate => simulate_stage(input, output, config)?,
        Stage::Label => label_stage(input, output, config, backends)?,
    };
    report.elapsed_ms = start.elapsed().as_millis();
    for w in &report.warnings {
        log::warn!("{stage}: {w}");
    }
    for e in &report.errors {
        log::error!("{stage}: {}: {}", e.id, e.error);
    }
    write_report(output, &report)?;
    Ok(report)
}

fn copy_image(src: &Path, dest_dir: &Path, id: &str, kind: &str) -> Result<PathBuf> {
    let ext = src.extension().and_then(|e| e.to_str()).unwrap_or("img").to_lowercase();
    let name = PathBuf::from(format!("{id}_{kind}.{ext}"));
    let dest = dest_dir.join(&name);
    fs::copy(src, &dest).map_err(|e| Error::io(src, e))?;
    Ok(name)
}

fn ingest_stage(input: &Path, output: &Path) -> Result<StageReport> {
    let mut report = StageReport::new(Stage::Ingest);
    let ingested = load_home_records(input)?;
    for issue in &ingested.report {
        let name = issue.file.file_name().map(|n| n.to_string_lossy()).unwrap_or_default();
        if issue.skipped {
            report.fail(&name, &issue.reason);
        } else {
            report.warnings.push(format!("{name}: {}", issue.reason));
        }
    }
    report.processed = ingested.records.len() + report.errors.len();
    let dir = output.join(RECORDS_DIR);
    fresh_dir(&dir)?;
    for mut rec in ingested.records {
        if let Some(p) = rec.photo_path.take() {
            rec.photo_path = Some(copy_image(&p, &dir, &rec.id, "photo")?);
        }
        if let Some(p) = rec.floorplan_path.take() {
            rec.floorplan_path = Some(copy_image(&p, &dir, &rec.id, "floorplan")?);
        }
        let mut text = serde_json::to_string_pretty(&rec)?;
        text.push('\n');
        write(&dir.join(format!("{}.json", rec.id)), text)?;
        report.succeeded += 1;
    }
    Ok(report)
}

fn load_records(input: &Path, stage: Stage) -> Result<Vec<HomeRecord>> {
    let dir = upstream(input, RECORDS_DIR, stage)?;
    let ingested = load_home_records(&dir)?;
    for issue in ingested.report.iter().filter(|i| i.skipped) {
        log::warn!("{stage}: ignoring {}: {}", issue.file.display(), issue.reason);
    }
    Ok(ingested.records)
}

fn describe_stage(input: &Path, output: &Path, config: &Config, backends: &Backends) -> Result<StageReport> {
    let mut report = StageReport::new(Stage::Describe);
    let records = load_records(input, Stage::Describe)?;
    let dir = output.join(DESCRIPTIONS_DIR);
    fresh_dir(&dir)?;
    let results: Vec<Result<Option<ImageDescription>>> = pool(config.parallelism)?.install(|| {
        records
            .par_iter()
            .map(|r| {
                if r.has_images() {
                    describe_home(backends.vision.as_ref(), r, &config.prompts).map(Some)
                } else {
                    Ok(None)
                }
            })
            .collect()
    });
    report.processed = records.len();
    for (rec, res) in records.iter().zip(results) {
        match res {
            Ok(desc) => {
                if desc.is_none() {
                    report
                        .warnings
                        .push(format!("{}: no images; generating from metadata only", rec.id));
                }
                write(
                    &dir.join(format!("{}.json", rec.id)),
                    serde_json::to_string_pretty(&desc)? + "\n",
                )?;
                report.succeeded += 1;
            }
            Err(e) => report.fail(&rec.id, e),
        }
    }
    Ok(report)
}

fn generate_stage(input: &Path, output: &Path, config: &Config, backends: &Backends) -> Result<StageReport> {
    let mut report = StageReport::new(Stage::Generate);
    let records = load_records(input, Stage::Generate)?;
    let desc_dir = upstream(input, DESCRIPTIONS_DIR, Stage::Generate)?;
    let descriptions: BTreeMap<String, Result<Option<ImageDescription>>> =
        read_artifacts(&desc_dir, "json")?.into_iter().collect();
    let dir = output.join(FEATURES_DIR);
    fresh_dir(&dir)?;

    let mut work = Vec::new();
    for rec in &records {
        match descriptions.get(&rec.id) {
            None => log::info!("generate: {} has no description; skipped", rec.id),
            Some(Err(e)) => report.fail(&rec.id, e),
            Some(Ok(desc)) => {
                let desc = desc.clone().unwrap_or_else(|| ImageDescription {
                    facade_text: String::new(),
                    floorplan_text: String::new(),
                    backend_id: String::new(),
                });
                work.push((rec, desc));
            }
        }
    }
    let attempts = config.retries.generation_attempts;
    let results: Vec<_> = pool(config.parallelism)?.install(|| {
        work.par_iter()
            .map(|(rec, desc)| generate_feature(backends.text.as_ref(), &build_generation_prompt(rec, desc), attempts))
            .collect()
    });
    report.processed = records.len();
    for ((rec, _), res) in work.iter().zip(results) {
        match res {
            Ok(generated) => {
                for w in &generated.warnings {
                    report.warnings.push(format!("{}: {w}", rec.id));
                }
                if let Some(w) = plausibility_warning(&generated.feature, rec) {
                    report.warnings.push(format!("{}: {w}", rec.id));
                }
                let text = serde_json::to_string_pretty(&generated.feature)? + "\n";
                write(&dir.join(format!("{}.geojson", rec.id)), text)?;
                report.succeeded += 1;
            }
            Err(e) => report.fail(&rec.id, e),
        }
    }
    Ok(report)
}

fn simulate_one(feature: &BuildingFeature, config: &Config) -> Result<SimulationResult> {
    match &config.engine {
        EngineConfig::Surrogate => run_surrogate(feature, &config.climate),
        EngineConfig::External {
            weather, engine_home, ..
        } => {
            let idf = render_idf(feature, &config.template()?)?;
            run_external(&idf, weather, engine_home)
        }
    }
}

fn simulate_stage(input: &Path, output: &Path, config: &Config) -> Result<StageReport> {
    let mut report = StageReport::new(Stage::Simulate);
    let feat_dir = upstream(input, FEATURES_DIR, Stage::Simulate)?;
    let features: Vec<(String, Result<BuildingFeature>)> = read_artifacts(&feat_dir, "geojson")?;
    let dir = output.join(SIMULATIONS_DIR);
    fresh_dir(&dir)?;
    let results: Vec<Result<SimulationResult>> = pool(config.parallelism)?.install(|| {
        features
            .par_iter()
            .map(|(_, f)| match f {
                Ok(f) => simulate_one(f, config),
                Err(e) => Err(Error::Parse(e.to_string())),
            })
            .collect()
    });
    report.processed = features.len();
    for ((id, _), res) in features.iter().zip(results) {
        match res {
            Ok(sim) => {
                write(
                    &dir.join(format!("{id}.json")),
                    serde_json::to_string_pretty(&sim)? + "\n",
                )?;
                report.succeeded += 1;
            }
            Err(e) => report.fail(id, e),
        }
    }
    Ok(report)
}

/// Upstream error rows in stage order.
fn upstream_errors(input: &Path) -> Result<Vec<ErrorRow>> {
    let mut rows = Vec::new();
    for stage in &Stage::ALL[..4] {
        let path = input.join(REPORTS_DIR).join(format!("{stage}.errors.jsonl"));
        if !path.is_file() {
            continue;
        }
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            rows.push(serde_json::from_str(line)?);
        }
    }
    Ok(rows)
}

fn label_stage(input: &Path, output: &Path, config: &Config, backends: &Backends) -> Result<StageReport> {
    let mut report = StageReport::new(Stage::Label);
    let sim_dir = upstream(input, SIMULATIONS_DIR, Stage::Label)?;
    let feat_dir = upstream(input, FEATURES_DIR, Stage::Label)?;
    let sims: Vec<(String, Result<SimulationResult>)> = read_artifacts(&sim_dir, "json")?;
    let features: BTreeMap<String, Result<BuildingFeature>> =
        read_artifacts(&feat_dir, "geojson")?.into_iter().collect();

    let mut inputs = Vec::new();
    for (id, sim) in sims {
        let note = match features.get(&id) {
            Some(Ok(f)) => f.inspection_note.clone(),
            Some(Err(e)) => {
                report.fail(&id, e);
                continue;
            }
            None => {
                report.fail(&id, "feature file missing");
                continue;
            }
        };
        match sim {
            Ok(simulation) => inputs.push(LabelInput {
                id,
                inspection_note: note,
                simulation,
            }),
            Err(e) => report.fail(&id, e),
        }
    }
    report.processed = inputs.len() + report.errors.len();

    let mut homes = Vec::new();
    if !inputs.is_empty() {
        let labeled = label_dataset(&inputs, backends.text.as_ref(), &config.labeler)?;
        report.warnings.extend(labeled.warnings);
        report.errors.extend(labeled.errors);
        report.extremes = labeled.extremes;
        homes = labeled.homes;
    }
    report.succeeded = homes.len();
    write(&output.join(LABELS_FILE), jsonl(&homes))?;
    let mut errors = upstream_errors(input)?;
    errors.extend(report.errors.iter().cloned());
    write(&output.join(LABEL_ERRORS_FILE), jsonl(&errors))?;
    Ok(report)
}

#[derive(Debug, Clone)]
pub struct PipelineOutcome {
    pub reports: Vec<StageReport>,
    pub labeled: usize,
    pub manifest: Value,
}

/// All five stages in `work_dir`, then the run manifest.
pub fn run_pipeline(config: &Config, dataset: &Path, work_dir: &Path) -> Result<PipelineOutcome> {
    config.check()?;
    let backends = config.backends()?;
    let started = SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0);
    let clock = Instant::now();
    let mut reports = Vec::new();
    for stage in Stage::ALL {
        let input = if stage == Stage::Ingest { dataset } else { work_dir };
        reports.push(run_stage(stage, input, work_dir, config, &backends)?);
    }
    let labeled = reports.last().map(|r| r.succeeded).unwrap_or(0);
    let manifest = manifest(
        config,
        &backends,
        &reports,
        dataset,
        started,
        clock.elapsed().as_millis(),
    );
    write(
        &work_dir.join(MANIFEST_FILE),
        serde_json::to_string_pretty(&manifest)? + "\n",
    )?;
    Ok(PipelineOutcome {
        reports,
        labeled,
        manifest,
    })
}

fn manifest(
    config: &Config,
    backends: &Backends,
    reports: &[StageReport],
    dataset: &Path,
    started_unix: u64,
    total_ms: u128,
) -> Value {
    let ingested = reports.first().map(|r| r.succeeded).unwrap_or(0);
    let labeled = reports.last().map(|r| r.succeeded).unwrap_or(0);
    let calls: BTreeMap<&str, u64> = backends.counts.snapshot().into_iter().collect();
    let total_calls: u64 = calls.values().sum();
    let per_home = |n: u64| if ingested == 0 { 0.0 } else { n as f64 / ingested as f64 };
    let extremes = reports
        .last()
        .map(|r| serde_json::to_value(&r.extremes).unwrap_or(Value::Null))
        .unwrap_or(Value::Null);
    json!({
        "config_hash": config.hash(),
        "config": serde_json::to_value(config).unwrap_or(Value::Null),
        "dataset": dataset.display().to_string(),
        "started_at_unix": started_unix,
        "backends": {
            "vision": backends.vision.id(),
            "text": backends.text.id(),
            "embed": backends.embed.id(),
        },
        "engine": match config.engine { EngineConfig::Surrogate => "surrogate", EngineConfig::External { .. } => "external" },
        "extremes": extremes,
        "homes": {
            "ingested": ingested,
            "labeled": labeled,
            "failed": reports.iter().map(|r| r.errors.len()).sum::<usize>(),
        },
        "stages": reports.iter().map(|r| json!({
            "stage": r.stage,
            "processed": r.processed,
            "succeeded": r.succeeded,
            "failed": r.errors.len(),
            "warnings": r.warnings.len(),
            "elapsed_ms": r.elapsed_ms as u64,
        })).collect::<Vec<_>>(),
        "timings_ms": {
            "total": total_ms as u64,
        },
        "backend_calls": calls,
        "cost_estimate": {
            "backend_calls_per_home": per_home(total_calls),
            "vision_calls_per_home": per_home(calls["vision"]),
            "text_calls_per_home": per_home(calls["text"]),
        },
    })
}
