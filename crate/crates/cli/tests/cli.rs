use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/tests/fixtures")
}

fn synthomes(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_synthomes"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn arg(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn pipeline_labels_fixture_homes() {
    let out = tempfile::tempdir().unwrap();
    let dataset = fixtures().join("homes");
    let run = synthomes(&["pipeline", "--dataset", arg(&dataset), "--out", arg(out.path())]);
    assert_eq!(run.status.code(), Some(0), "{}", String::from_utf8_lossy(&run.stderr));
    let jsonl = fs::read_to_string(out.path().join("labels.jsonl")).unwrap();
    assert_eq!(jsonl.lines().count(), 5);
    assert!(out.path().join("manifest.json").is_file());
}

#[test]
fn rerun_is_byte_identical() {
    let dataset = fixtures().join("homes");
    let runs: Vec<String> = (0..2)
        .map(|_| {
            let out = tempfile::tempdir().unwrap();
            synthomes(&["pipeline", "--dataset", arg(&dataset), "--out", arg(out.path())]);
            fs::read_to_string(out.path().join("labels.jsonl")).unwrap()
        })
        .collect();
    assert_eq!(runs[0], runs[1]);
}

#[test]
fn empty_dataset_exits_1() {
    let data = tempfile::tempdir().unwrap();
    let out = tempfile::tempdir().unwrap();
    let run = synthomes(&["pipeline", "--dataset", arg(data.path()), "--out", arg(out.path())]);
    assert_eq!(run.status.code(), Some(1));
}

#[test]
fn invalid_config_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("config.json");
    fs::write(&cfg, r#"{"parallelism": 4, "no_such_field": true}"#).unwrap();
    let dataset = fixtures().join("homes");
    let run = synthomes(&[
        "pipeline",
        "--config",
        arg(&cfg),
        "--dataset",
        arg(&dataset),
        "--out",
        arg(dir.path()),
    ]);
    assert_eq!(run.status.code(), Some(2));
}

#[test]
fn external_engine_without_paths_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let dataset = fixtures().join("homes");
    let run = synthomes(&[
        "pipeline",
        "--engine",
        "external",
        "--dataset",
        arg(&dataset),
        "--out",
        arg(dir.path()),
    ]);
    assert_eq!(run.status.code(), Some(2));
}

#[test]
fn label_without_simulations_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let run = synthomes(&["label", "--input", arg(dir.path()), "--output", arg(dir.path())]);
    assert_eq!(run.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&run.stderr).contains("missing upstream"));
}

#[test]
fn stages_one_by_one() {
    let dir = tempfile::tempdir().unwrap();
    let work = arg(dir.path());
    let dataset = fixtures().join("homes");
    let ingest = synthomes(&["ingest", "--input", arg(&dataset), "--output", work]);
    assert_eq!(ingest.status.code(), Some(0));
    for stage in ["describe", "generate", "simulate", "label"] {
        let run = synthomes(&[stage, "--input", work, "--output", work]);
        assert_eq!(
            run.status.code(),
            Some(0),
            "{stage}: {}",
            String::from_utf8_lossy(&run.stderr)
        );
        let report: serde_json::Value = serde_json::from_slice(&run.stdout).unwrap();
        assert_eq!(report["stage"], stage);
    }
    assert_eq!(fs::read_dir(dir.path().join("simulations")).unwrap().count(), 5);
    let described = fs::read_to_string(dir.path().join("descriptions/h4.json")).unwrap();
    let h4: serde_json::Value = serde_json::from_str(&described).unwrap();
    assert_eq!(h4["floorplan_text"], "");
}

#[test]
fn occlusion_writes_report_heatmap_and_csv() {
    let dir = tempfile::tempdir().unwrap();
    let image = fixtures().join("occlusion/facade.png");
    let run = synthomes(&[
        "eval",
        "occlusion",
        "--image",
        arg(&image),
        "--cells",
        "100",
        "--out",
        arg(dir.path()),
    ]);
    assert_eq!(run.status.code(), Some(0), "{}", String::from_utf8_lossy(&run.stderr));
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("report.json")).unwrap()).unwrap();
    assert_eq!(report["distances"].as_array().unwrap().len(), 100);
    assert!(report["rmd"].is_f64() && report["nrmd"].is_f64());
    let csv = fs::read_to_string(dir.path().join("distances.csv")).unwrap();
    assert_eq!(csv.lines().count(), 101);
    assert!(dir.path().join("heatmap.png").is_file());
}

#[test]
fn ablation_sim_csv() {
    let run = synthomes(&[
        "eval",
        "ablation",
        "--mode",
        "sim",
        "--variable",
        "HVACC",
        "--trials",
        "2",
    ]);
    assert_eq!(run.status.code(), Some(0));
    let text = String::from_utf8(run.stdout).unwrap();
    let rows: Vec<&str> = text.lines().collect();
    assert_eq!(
        rows[0],
        "row,value,hvac_mu_mean,hvac_mu_sd,insulation_mu_mean,insulation_mu_sd,trials,error"
    );
    assert_eq!(rows.len(), 6);
    assert!(rows[1].starts_with("HVACC1,"));
}

#[test]
fn ablation_unknown_variable_exits_2() {
    let run = synthomes(&["eval", "ablation", "--mode", "sim", "--variable", "DOORS"]);
    assert_eq!(run.status.code(), Some(2));
}

#[test]
fn ablation_combined_to_file() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("combined.csv");
    let run = synthomes(&[
        "eval",
        "ablation",
        "--mode",
        "combined",
        "--category",
        "insulation",
        "--trials",
        "1",
        "--out",
        arg(&out),
    ]);
    assert_eq!(run.status.code(), Some(0));
    assert_eq!(fs::read_to_string(out).unwrap().lines().count(), 5);
}

#[test]
fn normalized_mu_doubles_scores() {
    let scores = |extra: &[&str]| -> Vec<f64> {
        let mut args = vec!["eval", "ablation", "--mode", "sim", "--trials", "1"];
        args.extend_from_slice(extra);
        let text = String::from_utf8(synthomes(&args).stdout).unwrap();
        text.lines()
            .skip(1)
            .map(|l| l.split(',').nth(2).unwrap().parse().unwrap())
            .collect()
    };
    let plain = scores(&[]);
    let doubled = scores(&["--normalized-mu"]);
    for (a, b) in plain.iter().zip(&doubled) {
        assert!((2.0 * a - b).abs() < 1e-5, "{a} vs {b}");
    }
}
