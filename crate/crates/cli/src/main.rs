use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use synthomes_core::config::{Config, EngineConfig};
use synthomes_core::eval::ablation::{
    ablation_sim, ablation_text, combined_variation, default_text_notes, AblationSetup, AblationTable,
    AblationVariable, CombinedInputs, Labeler, NEUTRAL_NOTE,
};
use synthomes_core::eval::occlusion::{occlusion_run, read_mask_csv, render_heatmap, with_region};
use synthomes_core::pipeline::{run_pipeline, run_stage, Stage, LABELS_FILE};
use synthomes_core::{Category, Error, PerformanceParams};

/// Exit status for bad configuration, bad paths and missing upstream artifacts.
const EXIT_USAGE: u8 = 2;
/// Exit status when a run finishes but labels nothing.
const EXIT_NOTHING_LABELED: u8 = 1;

#[derive(Parser)]
#[command(name = "synthomes", version, about = "Synthetic home energy dataset pipeline")]
struct Cli {
    #[command(flatten)]
    overrides: Overrides,
    #[command(subcommand)]
    command: Command,
}

/// Settings applied on top of the config file.
#[derive(Args)]
struct Overrides {
    /// JSON config file; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true, value_enum)]
    engine: Option<EngineKind>,
    /// Weather file for the external engine.
    #[arg(long, global = true)]
    weather: Option<PathBuf>,
    /// Install directory of the external engine.
    #[arg(long, global = true)]
    engine_home: Option<PathBuf>,
    /// Heating degree-days (°C·day) for the surrogate.
    #[arg(long, global = true)]
    hdd: Option<f64>,
    /// Cooling degree-days (°C·day) for the surrogate.
    #[arg(long, global = true)]
    cdd: Option<f64>,
    /// Report μ scaled to [0, 1] instead of [0, 0.5].
    #[arg(long, global = true)]
    normalized_mu: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum EngineKind {
    Surrogate,
    External,
}

#[derive(Subcommand)]
enum Command {
    /// Validate raw home records and copy their images.
    Ingest(StageArgs),
    /// Describe facade photos and floor plans.
    Describe(StageArgs),
    /// Generate one building feature per home.
    Generate(StageArgs),
    /// Simulate every generated feature.
    Simulate(StageArgs),
    /// Score and label every simulated home.
    Label(StageArgs),
    /// Run all stages from a raw dataset.
    Pipeline {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Occlusion and ablation evaluation harnesses.
    #[command(subcommand)]
    Eval(Eval),
}

#[derive(Args)]
struct StageArgs {
    /// Raw dataset for `ingest`, else the working directory of the previous stage.
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    output: PathBuf,
}

#[derive(Subcommand)]
enum Eval {
    /// Mask each grid cell in turn and measure how far the description drifts.
    Occlusion {
        #[arg(long)]
        image: PathBuf,
        /// k×k CSV of 0/1 region cells; defaults to `<image>.mask.csv` when present.
        #[arg(long)]
        mask: Option<PathBuf>,
        #[arg(long, default_value_t = 100)]
        cells: usize,
        /// Directory for report.json, heatmap.png and distances.csv.
        #[arg(long)]
        out: PathBuf,
        /// Prompt for the vision model; defaults to the configured facade prompt.
        #[arg(long)]
        prompt: Option<String>,
    },
    /// Vary notes, simulation inputs, or both, and record the label response.
    Ablation {
        #[arg(long, value_enum)]
        mode: AblationMode,
        /// WALLR, ROOFR, HVACH or HVACC (sim mode).
        #[arg(long, default_value = "HVACC")]
        variable: String,
        /// Category whose default notes and lever are crossed (combined mode).
        #[arg(long, value_enum, default_value = "hvac")]
        category: CategoryArg,
        #[arg(long, default_value_t = 5)]
        trials: usize,
        /// Note held fixed in sim mode.
        #[arg(long)]
        note: Option<String>,
        /// CSV destination; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum AblationMode {
    Text,
    Sim,
    Combined,
}

#[derive(Clone, Copy, ValueEnum)]
enum CategoryArg {
    Hvac,
    Insulation,
}

impl From<CategoryArg> for Category {
    fn from(c: CategoryArg) -> Self {
        match c {
            CategoryArg::Hvac => Category::Hvac,
            CategoryArg::Insulation => Category::Insulation,
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &anyhow::Error) -> u8 {
    match e.downcast_ref::<Error>() {
        Some(Error::Config(_) | Error::Upstream(_) | Error::Input(_)) => EXIT_USAGE,
        Some(_) => 1,
        None => EXIT_USAGE,
    }
}

fn load_config(o: &Overrides) -> anyhow::Result<Config> {
    let mut cfg = match &o.config {
        Some(path) => Config::load(path)?,
        None => Config::default(),
    };
    if let Some(kind) = o.engine {
        cfg.engine = match (kind, &cfg.engine) {
            (EngineKind::Surrogate, _) => EngineConfig::Surrogate,
            (EngineKind::External, EngineConfig::External { .. }) => cfg.engine.clone(),
            (EngineKind::External, EngineConfig::Surrogate) => EngineConfig::External {
                weather: PathBuf::new(),
                engine_home: PathBuf::new(),
                template: None,
            },
        };
    }
    if let EngineConfig::External {
        weather, engine_home, ..
    } = &mut cfg.engine
    {
        if let Some(w) = &o.weather {
            *weather = w.clone();
        }
        if let Some(h) = &o.engine_home {
            *engine_home = h.clone();
        }
        if weather.as_os_str().is_empty() || engine_home.as_os_str().is_empty() {
            return Err(Error::Config("external engine needs --weather and --engine-home".into()).into());
        }
    }
    if let Some(hdd) = o.hdd {
        cfg.climate.hdd = hdd;
    }
    if let Some(cdd) = o.cdd {
        cfg.climate.cdd = cdd;
    }
    if o.normalized_mu {
        cfg.labeler.normalized_mu = true;
    }
    cfg.check()?;
    Ok(cfg)
}

fn run(cli: Cli) -> anyhow::Result<ExitCode> {
    let cfg = load_config(&cli.overrides)?;
    match cli.command {
        Command::Ingest(a) => stage(Stage::Ingest, a, &cfg),
        Command::Describe(a) => stage(Stage::Describe, a, &cfg),
        Command::Generate(a) => stage(Stage::Generate, a, &cfg),
        Command::Simulate(a) => stage(Stage::Simulate, a, &cfg),
        Command::Label(a) => stage(Stage::Label, a, &cfg),
        Command::Pipeline { dataset, out } => pipeline(&cfg, &dataset, &out),
        Command::Eval(Eval::Occlusion {
            image,
            mask,
            cells,
            out,
            prompt,
        }) => occlusion(&cfg, &image, mask, cells, &out, prompt),
        Command::Eval(Eval::Ablation {
            mode,
            variable,
            category,
            trials,
            note,
            out,
        }) => ablation(&cfg, mode, &variable, category.into(), trials, note, out.as_deref()),
    }
}

fn existing_dir(path: &Path, what: &str) -> anyhow::Result<()> {
    if !path.is_dir() {
        bail!("{what} {} is not a directory", path.display());
    }
    Ok(())
}

fn stage(stage: Stage, args: StageArgs, cfg: &Config) -> anyhow::Result<ExitCode> {
    existing_dir(&args.input, "input")?;
    fs::create_dir_all(&args.output).with_context(|| format!("creating {}", args.output.display()))?;
    let backends = cfg.backends()?;
    let report = run_stage(stage, &args.input, &args.output, cfg, &backends)?;
    log::info!(
        "{stage}: {}/{} succeeded, {} failed, {} warnings, {} ms",
        report.succeeded,
        report.processed,
        report.errors.len(),
        report.warnings.len(),
        report.elapsed_ms
    );
    println!("{}", serde_json::to_string(&report)?);
    Ok(ExitCode::SUCCESS)
}

fn pipeline(cfg: &Config, dataset: &Path, out: &Path) -> anyhow::Result<ExitCode> {
    existing_dir(dataset, "dataset")?;
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let outcome = run_pipeline(cfg, dataset, out)?;
    for r in &outcome.reports {
        log::info!("{}: {}/{} succeeded", r.stage, r.succeeded, r.processed);
    }
    println!("{}", out.join(LABELS_FILE).display());
    if outcome.labeled == 0 {
        log::error!("no homes were labeled");
        return Ok(ExitCode::from(EXIT_NOTHING_LABELED));
    }
    log::info!("labeled {} homes", outcome.labeled);
    Ok(ExitCode::SUCCESS)
}

fn occlusion(
    cfg: &Config,
    image_path: &Path,
    mask: Option<PathBuf>,
    cells: usize,
    out: &Path,
    prompt: Option<String>,
) -> anyhow::Result<ExitCode> {
    let image = image::open(image_path)
        .with_context(|| format!("reading {}", image_path.display()))?
        .to_rgba8();
    let mask = mask.or_else(|| {
        let sidecar = PathBuf::from(format!("{}.mask.csv", image_path.with_extension("").display()));
        sidecar.is_file().then_some(sidecar)
    });
    let id = image_path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    let prompt = prompt.unwrap_or_else(|| cfg.prompts.facade.clone());
    let backends = cfg.backends()?;
    let mut report = occlusion_run(
        &image,
        &id,
        &prompt,
        backends.vision.as_ref(),
        backends.embed.as_ref(),
        cells,
        cfg.parallelism,
    )?;
    if let Some(mask) = &mask {
        let region = read_mask_csv(mask, report.grid_rows)?;
        report = with_region(report, region)?;
        log::info!(
            "rmd {:.6}, nrmd {:.6}",
            report.rmd.unwrap_or(f64::NAN),
            report.nrmd.unwrap_or(f64::NAN)
        );
    }
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    render_heatmap(&report, &out.join("heatmap.png"), &out.join("distances.csv"))?;
    fs::write(out.join("report.json"), serde_json::to_string_pretty(&report)? + "\n")?;
    println!("{}", out.join("report.json").display());
    Ok(ExitCode::SUCCESS)
}

fn ablation(
    cfg: &Config,
    mode: AblationMode,
    variable: &str,
    category: Category,
    trials: usize,
    note: Option<String>,
    out: Option<&Path>,
) -> anyhow::Result<ExitCode> {
    let setup = AblationSetup {
        climate: cfg.climate,
        ..AblationSetup::default()
    };
    let backends = cfg.backends()?;
    let labeler = Labeler {
        backend: backends.text.as_ref(),
        config: &cfg.labeler,
    };
    let table: AblationTable = match mode {
        AblationMode::Text => {
            let sim = setup.simulate(PerformanceParams::DEFAULTS)?;
            ablation_text(labeler, &default_text_notes(), &sim, trials, &setup)?
        }
        AblationMode::Sim => {
            let variable: AblationVariable = variable.parse()?;
            ablation_sim(
                labeler,
                note.as_deref().unwrap_or(NEUTRAL_NOTE),
                variable,
                trials,
                &setup,
            )?
        }
        AblationMode::Combined => {
            let inputs = CombinedInputs::defaults(category, &setup)?;
            combined_variation(labeler, &inputs, trials, &setup)?
        }
    };
    for row in table.rows.iter().filter(|r| !r.errors.is_empty()) {
        log::warn!("{}: {}", row.label, row.errors.join("; "));
    }
    let csv = table.to_csv()?;
    match out {
        Some(path) => fs::write(path, csv).with_context(|| format!("writing {}", path.display()))?,
        None => print!("{csv}"),
    }
    Ok(ExitCode::SUCCESS)
}
