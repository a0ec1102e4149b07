use std::fs;

use mlplatt::bench::{
    run_ablation, run_benchmark, run_rcr_comparison, run_theta_sweep, CalibratorSpec, DatasetSource,
    ExperimentConfig,
};
use mlplatt::calibrators::{FittedCalibrator, MlplattConfig};
use mlplatt::datagen::GeneratorConfig;
use mlplatt::dataio::read_dataset;
use mlplatt::Error;

fn small(out: &std::path::Path) -> ExperimentConfig {
    let mut config = ExperimentConfig {
        seeds: vec![0, 1],
        bootstrap_resamples: 50,
        out_dir: out.to_path_buf(),
        dataset: DatasetSource::Synthetic(GeneratorConfig {
            listings: 300,
            ..GeneratorConfig::default()
        }),
        calibrators: vec![
            CalibratorSpec::Platt,
            CalibratorSpec::Mlplatt(MlplattConfig {
                epochs: 2,
                batch_size: 256,
                ..MlplattConfig::default()
            }),
        ],
        thetas: vec![0.0, 1.0],
        rcr_alphas: vec![1e-2],
        ..ExperimentConfig::default()
    };
    config.ranker.epochs = 1;
    config
}

#[test]
fn benchmark_writes_report_records_and_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let config = small(dir.path());
    let out = run_benchmark(&config).unwrap();
    assert_eq!(out.dir, dir.path().join(format!("run-{}", config.hash().unwrap())).join("bench"));
    let labels: Vec<&str> = out.table.rows.iter().map(|r| r.label.as_str()).collect();
    assert_eq!(labels, ["Platt", "MLPlatt"]);
    let names: Vec<&str> = out.table.columns.iter().map(|c| c.name.as_str()).collect();
    assert_eq!(names, ["F-ECE", "LogLoss", "NDCG", "AUC", "Oracle F-ECE"]);
    assert!(out.table.rows[0].p_values.is_some());
    assert!(out.table.rows[1].p_values.is_none());
    assert!(out.markdown.contains("p vs MLPlatt"));
    assert_eq!(fs::read_to_string(out.dir.join("report.md")).unwrap(), out.markdown);
    assert!(out.records.lines().any(|l| l.starts_with("table=bench method=Platt seed=0 ")));
    let back = ExperimentConfig::from_toml(&fs::read_to_string(out.dir.join("config.toml")).unwrap()).unwrap();
    assert_eq!(back, config);
    let model = FittedCalibrator::from_bytes(&fs::read(out.dir.join("seed-1/mlplatt.mlpc")).unwrap()).unwrap();
    assert!(matches!(model, FittedCalibrator::Mlplatt(_)));
    let scored = read_dataset(out.dir.join("seed-0/platt.tsv")).unwrap();
    assert!(scored.is_scored() && scored.has_ground_truth());
}

#[test]
fn reruns_are_byte_identical() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let ra = run_benchmark(&small(a.path())).unwrap();
    let rb = run_benchmark(&small(b.path())).unwrap();
    assert_eq!(ra.markdown, rb.markdown);
    assert_eq!(ra.records, rb.records);
    for f in ["report.md", "records.txt", "seed-0/mlplatt.mlpc", "seed-1/mlplatt.tsv"] {
        assert_eq!(fs::read(ra.dir.join(f)).unwrap(), fs::read(rb.dir.join(f)).unwrap(), "{f}");
    }
}

#[test]
fn single_row_roster_has_no_significance_column() {
    let dir = tempfile::tempdir().unwrap();
    let config = ExperimentConfig {
        calibrators: vec![CalibratorSpec::Platt],
        seeds: vec![3],
        write_artifacts: false,
        ..small(dir.path())
    };
    let out = run_benchmark(&config).unwrap();
    assert_eq!(out.table.rows.len(), 1);
    assert!(!out.markdown.contains("p vs"));
    assert!(!out.dir.join("seed-3").exists());
}

#[test]
fn ablation_rows_and_exact_ndcg_of_linear_head() {
    let dir = tempfile::tempdir().unwrap();
    let out = run_ablation(&small(dir.path())).unwrap();
    let labels: Vec<&str> = out.table.rows.iter().map(|r| r.label.as_str()).collect();
    assert_eq!(labels, ["Raw ranker", "Platt", "No Context Model", "No MonoMLP", "MLPlatt"]);
    let ndcg = out.table.column("NDCG").unwrap();
    let raw = out.table.row("Raw ranker").unwrap();
    for row in ["Platt", "No MonoMLP"] {
        assert_eq!(out.table.row(row).unwrap().per_seed.iter().map(|v| v[ndcg]).collect::<Vec<_>>(),
            raw.per_seed.iter().map(|v| v[ndcg]).collect::<Vec<_>>(), "{row}");
    }
}

#[test]
fn rcr_rows_are_labelled_by_alpha() {
    let dir = tempfile::tempdir().unwrap();
    let out = run_rcr_comparison(&small(dir.path())).unwrap();
    let labels: Vec<&str> = out.table.rows.iter().map(|r| r.label.as_str()).collect();
    assert_eq!(labels, ["RCR α=1e-2", "MLPlatt"]);
    let empty = ExperimentConfig {
        rcr_alphas: vec![],
        ..small(dir.path())
    };
    assert!(matches!(run_rcr_comparison(&empty), Err(Error::Config(_))));
}

#[test]
fn theta_sweep_rows_and_errors() {
    let dir = tempfile::tempdir().unwrap();
    let config = ExperimentConfig {
        seeds: vec![0],
        ..small(dir.path())
    };
    let out = run_theta_sweep(&config).unwrap();
    let labels: Vec<&str> = out.table.rows.iter().map(|r| r.label.as_str()).collect();
    assert_eq!(labels, ["θ=0", "θ=1"]);
    let mis = out.table.get("θ=1", "Misordered").unwrap();
    assert!((0.0..=1.0).contains(&mis));
    let empty = ExperimentConfig {
        thetas: vec![],
        ..config
    };
    assert!(matches!(run_theta_sweep(&empty), Err(Error::Config(_))));
}

#[test]
fn failures_name_the_stage() {
    let dir = tempfile::tempdir().unwrap();
    let config = ExperimentConfig {
        dataset: DatasetSource::File {
            path: dir.path().join("missing.tsv"),
        },
        ..small(dir.path())
    };
    let err = run_benchmark(&config).unwrap_err();
    assert!(matches!(&err, Error::Stage { stage: "data", .. }), "{err}");
    assert!(err.to_string().starts_with("data stage failed"));
}
