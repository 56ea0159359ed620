use std::path::{Path, PathBuf};
use std::process::Command;

use conflicts_cli::{
    assess_file, parse_config, render_report, run_matrix, sweep_hyperparams, Axis, ExperimentConfig, Format,
    MatrixOptions, RecordFile,
};

fn configs_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn toy() -> ExperimentConfig {
    parse_config(&configs_dir().join("toy.toml")).unwrap()
}

const ORDERED: &str = r#"
name = "reorder"
pair = ["dp", "wm"]
seed = 4

[dataset.synth]
kind = "gaussian-blobs"
n_train = 200
n_test = 100
classes = 4
seed = 3

[train]
epochs = 3
batch_size = 20

[wm]
trigger_size = 20
"#;

const SHUFFLED: &str = r#"
seed = 4
pair = ["dp", "wm"]
name = "reorder"

[wm]
trigger_size = 20

[train]
batch_size = 20
epochs = 3

[dataset.synth]
seed = 3
classes = 4
n_test = 100
n_train = 200
kind = "gaussian-blobs"
"#;

#[test]
fn hash_ignores_key_order_but_not_values() {
    let a = ExperimentConfig::from_toml(ORDERED).unwrap();
    let b = ExperimentConfig::from_toml(SHUFFLED).unwrap();
    assert_eq!(a.hash(), b.hash());
    let c = ExperimentConfig::from_toml(&ORDERED.replace("epochs = 3", "epochs = 4")).unwrap();
    assert_ne!(a.hash(), c.hash());
}

#[test]
fn a_single_seed_is_rejected() {
    let err = ExperimentConfig::from_toml(&format!("repeats = 1\n{ORDERED}")).unwrap_err();
    assert!(format!("{err:#}").contains("repeats"), "{err:#}");
}

#[test]
fn resume_reruns_only_the_missing_record() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("toy.jsonl");
    let options = MatrixOptions {
        workers: 2,
        ..MatrixOptions::default()
    };
    let config = toy();
    let first = run_matrix(&config, &configs_dir(), &out, &options).unwrap();
    assert_eq!(first.executed, first.records.len());
    let before = render_report(std::slice::from_ref(&first), Format::Json).unwrap();

    let text = std::fs::read_to_string(&out).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    let victim = lines.iter().position(|l| l.contains(r#""label":"combined""#)).unwrap();
    let kept: String = lines
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != victim)
        .map(|(_, l)| format!("{l}\n"))
        .collect();
    std::fs::write(&out, kept).unwrap();

    let second = run_matrix(&config, &configs_dir(), &out, &options).unwrap();
    assert_eq!(second.executed, 1);
    assert_eq!(render_report(&[second], Format::Json).unwrap(), before);
}

#[test]
fn csv_report_has_one_row_per_label_and_metric() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("toy.jsonl");
    run_matrix(&toy(), &configs_dir(), &out, &MatrixOptions::default()).unwrap();
    let results = assess_file(&RecordFile::read(&out).unwrap()).unwrap();
    let csv = render_report(&results, Format::Csv).unwrap();
    let mut lines = csv.lines();
    assert_eq!(
        lines.next().unwrap(),
        "config_hash,pair,dataset,label,metric,n,mean,sd,values"
    );
    let rows: Vec<Vec<&str>> = lines.map(|l| l.split(',').collect()).collect();
    // dp-alone: acc, epsilon; wm-alone: acc, wm; combined: acc, wm, epsilon.
    assert_eq!(rows.len(), 7);
    for row in &rows {
        assert_eq!(row.len(), 9);
        let n: usize = row[5].parse().unwrap();
        assert_eq!(row[8].split(';').count(), n);
        let values: Vec<f64> = row[8].split(';').map(|v| v.parse().unwrap()).collect();
        let mean: f64 = row[6].parse().unwrap();
        assert!((values.iter().sum::<f64>() / n as f64 - mean).abs() < 1e-12);
    }
}

#[test]
fn sweep_writes_one_matrix_per_value() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("toy.jsonl");
    let sweep = sweep_hyperparams(
        &toy(),
        &configs_dir(),
        &out,
        Axis::TriggerSize,
        &[10.0, 20.0],
        &MatrixOptions::default(),
    )
    .unwrap();
    assert_eq!(sweep.points.len(), 2);
    assert_eq!(sweep.matrices.len(), 2);
    assert_ne!(sweep.matrices[0].config_hash, sweep.matrices[1].config_hash);
    let csv = sweep.curve_csv();
    assert_eq!(csv.lines().count(), 3, "{csv}");
    assert!(sweep_hyperparams(
        &toy(),
        &configs_dir(),
        &out,
        Axis::Gamma,
        &[0.1],
        &MatrixOptions::default()
    )
    .is_err());
}

fn conflicts(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_conflicts"))
        .args(args)
        .output()
        .unwrap()
}

#[test]
fn cli_runs_reports_and_reports_errors() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("toy.jsonl");
    let config = configs_dir().join("toy.toml");
    let run = conflicts(&["run", config.to_str().unwrap(), "--output", out.to_str().unwrap()]);
    assert!(run.status.code() == Some(0) || run.status.code() == Some(2), "{run:?}");
    let stdout = String::from_utf8(run.stdout).unwrap();
    assert!(stdout.starts_with("# Conflict report"));

    let report = conflicts(&["report", out.to_str().unwrap()]);
    assert_eq!(report.status.code(), run.status.code());
    assert_eq!(String::from_utf8(report.stdout).unwrap(), stdout);

    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, ORDERED.replace("epochs = 3", "epochs = 3\nepoch = 3")).unwrap();
    let failed = conflicts(&["run", bad.to_str().unwrap()]);
    assert_eq!(failed.status.code(), Some(1));
    assert!(String::from_utf8(failed.stderr).unwrap().contains("train.epoch"));
}
