//! Experiment harness: seeded end-to-end runs producing the benchmark,
//! ablation, penalty-sweep and RCR comparison tables.
//!
//! Every run trains a ranker per seed, records its scores, fits calibrators on
//! the training listings and evaluates them on the held-out listings. Reports
//! and artifacts go to `<out_dir>/run-<config hash>/<subcommand>/`.

mod bootstrap;
mod config;
mod report;

pub use bootstrap::{paired_bootstrap, WeightedEvaluator};
pub use config::{CalibratorSpec, DatasetSource, ExperimentConfig};
pub use report::{short_float, Better, Column, Row, Table};

use std::fs;
use std::path::{Path, PathBuf};

use log::info;

use crate::calibrators::{
    fit_mlplatt_with_report, fit_platt, fit_smoothed_isotonic, CalibrationRecord, Calibrator,
    ConfCalibPipeline, ContextArch, FittedCalibrator, MlplattConfig,
};
use crate::datagen::{generate, oracle_f_ece};
use crate::dataio::{build_calibration_set, load_aliexpress, read_dataset, split, write_dataset, Dataset};
use crate::metrics::{auc, mean_ndcg, misordered_fraction, MetricsReport, MISORDER_THRESHOLD};
use crate::nn::sigmoid;
use crate::ranker::{train_ranker, RankerConfig, RankerModel, RankingLoss};
use crate::{Error, Result};

const REFERENCE: &str = "MLPlatt";
const BOOTSTRAP_SALT: u64 = 0xB0B5_7A4B;
const HOLDOUT_SALT: u64 = 0x4B1D_0C0D;

/// One seed's data after ranker training.
pub struct SeedData {
    pub seed: u64,
    pub ranker: RankerModel,
    /// Records the calibrators are fitted on.
    pub calibration: Vec<CalibrationRecord>,
    pub test: Dataset,
    pub test_records: Vec<CalibrationRecord>,
}

/// Loads or generates the listings for one seed.
pub fn load_dataset(source: &DatasetSource, seed: u64) -> Result<Dataset> {
    let mut data = match source {
        DatasetSource::Synthetic(g) => {
            let mut g = g.clone();
            g.seed = g.seed.wrapping_add(seed);
            return generate(&g);
        }
        DatasetSource::File { path } => read_dataset(path)?,
        DatasetSource::Aliexpress { path, columns } => load_aliexpress(path, columns)?.dataset,
    };
    let dropped = data.retain_clicked();
    if dropped > 0 {
        info!("dropped {dropped} listings without clicks");
    }
    Ok(data)
}

fn ranker_config(config: &ExperimentConfig, seed: u64, loss: RankingLoss) -> RankerConfig {
    RankerConfig {
        loss,
        seed: config.ranker.seed.wrapping_add(seed),
        ..config.ranker.clone()
    }
}

/// Splits the seed's data, trains a ranker and assembles calibration records.
pub fn prepare_seed(config: &ExperimentConfig, seed: u64, loss: RankingLoss) -> Result<SeedData> {
    let data = load_dataset(&config.dataset, seed).map_err(|e| e.in_stage("data"))?;
    prepare_from(config, &data, seed, loss)
}

fn prepare_from(config: &ExperimentConfig, data: &Dataset, seed: u64, loss: RankingLoss) -> Result<SeedData> {
    let (train, test) = split(data, config.test_fraction, seed).map_err(|e| e.in_stage("split"))?;
    let (ranker_train, calib_train) = if config.calibration_holdout > 0.0 {
        let (a, b) = split(&train, config.calibration_holdout, seed ^ HOLDOUT_SALT)
            .map_err(|e| e.in_stage("split"))?;
        (a, Some(b))
    } else {
        (train, None)
    };
    let ranker = train_ranker(&ranker_train, &ranker_config(config, seed, loss))
        .map_err(|e| e.in_stage("ranker"))?;
    let calibration = build_calibration_set(
        &ranker,
        calib_train.as_ref().unwrap_or(&ranker_train),
        config.context_source,
    )
    .map_err(|e| e.in_stage("record"))?;
    let test_records =
        build_calibration_set(&ranker, &test, config.context_source).map_err(|e| e.in_stage("record"))?;
    Ok(SeedData {
        seed,
        ranker,
        calibration,
        test,
        test_records,
    })
}

fn seeded(m: &MlplattConfig, seed: u64) -> MlplattConfig {
    MlplattConfig {
        seed: m.seed.wrapping_add(seed),
        ..m.clone()
    }
}

fn fit_mlplatt_logged(records: &[CalibrationRecord], m: &MlplattConfig, seed: u64) -> Result<FittedCalibrator> {
    let (model, report) = fit_mlplatt_with_report(records, &seeded(m, seed))?;
    info!(
        "seed {seed}: MLPlatt theta={} loss {:.5} -> {:.5}, violation rate {}",
        m.theta, report.initial_loss, report.final_loss, report.violation_rate
    );
    Ok(FittedCalibrator::Mlplatt(model))
}

pub fn fit_calibrator(spec: &CalibratorSpec, records: &[CalibrationRecord], seed: u64) -> Result<FittedCalibrator> {
    let fitted = match spec {
        CalibratorSpec::Platt => FittedCalibrator::Platt(fit_platt(records)?),
        CalibratorSpec::SmoothedIsotonic { bins } => {
            FittedCalibrator::SmoothedIsotonic(fit_smoothed_isotonic(records, *bins)?)
        }
        CalibratorSpec::ConfCalib { level } => {
            FittedCalibrator::ConfCalib(ConfCalibPipeline::fit(records, *level)?)
        }
        CalibratorSpec::Mlplatt(m) => fit_mlplatt_logged(records, m, seed)?,
    };
    Ok(fitted)
}

/// Predictions of one table row on one seed's test records.
struct Scored {
    label: String,
    preds: Vec<f64>,
    /// Ranking scores when they differ from the predictions (raw ranker rows).
    ranking: Option<Vec<f64>>,
    model: Option<FittedCalibrator>,
    /// Test records scored by a different ranker than the seed's records.
    own_records: Option<Vec<CalibrationRecord>>,
}

struct SeedResult {
    seed: u64,
    test: Dataset,
    records: Vec<CalibrationRecord>,
    rows: Vec<Scored>,
}

fn raw_row(label: &str, records: &[CalibrationRecord]) -> Scored {
    let raw: Vec<f64> = records.iter().map(|r| r.r).collect();
    Scored {
        label: label.into(),
        preds: raw.iter().map(|&r| sigmoid(r)).collect(),
        ranking: Some(raw),
        model: None,
        own_records: None,
    }
}

fn calibrated_row(label: &str, model: FittedCalibrator, records: &[CalibrationRecord]) -> Result<Scored> {
    let preds = model.predict_all(records).map_err(|e| e.in_stage("predict"))?;
    Ok(Scored {
        label: label.into(),
        preds,
        ranking: None,
        model: Some(model),
        own_records: None,
    })
}

/// Directory a subcommand writes to.
pub fn output_dir(config: &ExperimentConfig, subcommand: &str) -> Result<PathBuf> {
    Ok(config.run_dir()?.join(subcommand))
}

/// A finished run: the table plus where its files went.
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub table: Table,
    pub seeds: Vec<u64>,
    pub markdown: String,
    pub records: String,
    pub dir: PathBuf,
}

fn write_outputs(config: &ExperimentConfig, subcommand: &str, table: Table, results: &[SeedResult]) -> Result<RunOutput> {
    let dir = output_dir(config, subcommand)?;
    let seeds: Vec<u64> = config.seeds.clone();
    let markdown = table.to_markdown();
    let mut records = table.to_records(&seeds);
    for res in results {
        for row in &res.rows {
            let recs = row.own_records.as_deref().unwrap_or(&res.records);
            let mut m = MetricsReport::evaluate(recs, &row.preds, config.bins)
                .map_err(|e| e.in_stage("evaluate"))?;
            if let Some(r) = &row.ranking {
                let labels: Vec<bool> = recs.iter().map(|x| x.click).collect();
                let ids: Vec<u64> = recs.iter().map(|x| x.listing).collect();
                m.ndcg = mean_ndcg(r, &labels, &ids).map_err(|e| e.in_stage("evaluate"))?.mean;
                m.auc = auc(r, &labels).unwrap_or(f64::NAN);
            }
            records.push_str(&format!("table={} seed={} {}\n", table.key, res.seed, m.to_record_line(&row.label)));
        }
    }
    let write = || -> Result<()> {
        fs::create_dir_all(&dir)?;
        fs::write(dir.join("config.toml"), config.to_toml()?)?;
        fs::write(dir.join("report.md"), &markdown)?;
        fs::write(dir.join("records.txt"), &records)?;
        if config.write_artifacts {
            for res in results {
                write_seed_artifacts(&dir.join(format!("seed-{}", res.seed)), res)?;
            }
        }
        Ok(())
    };
    write().map_err(|e| e.in_stage("report"))?;
    Ok(RunOutput {
        table,
        seeds,
        markdown,
        records,
        dir,
    })
}

fn file_stem(label: &str) -> String {
    label
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() { c.to_ascii_lowercase() } else { '_' })
        .collect()
}

fn write_seed_artifacts(dir: &Path, res: &SeedResult) -> Result<()> {
    fs::create_dir_all(dir)?;
    for row in &res.rows {
        if let Some(model) = &row.model {
            fs::write(dir.join(format!("{}.mlpc", file_stem(&row.label))), model.to_bytes())?;
        }
        let mut scored = res.test.clone();
        let mut preds = row.preds.iter();
        for listing in &mut scored.listings {
            for item in &mut listing.items {
                item.score = preds.next().copied();
            }
        }
        write_dataset(&scored, dir.join(format!("{}.tsv", file_stem(&row.label))))?;
    }
    Ok(())
}

fn metric_columns(with_oracle: bool) -> Vec<Column> {
    let mut cols = vec![
        Column::new("F-ECE", Better::Lower),
        Column::new("LogLoss", Better::Lower),
        Column::new("NDCG", Better::Higher),
        Column::new("AUC", Better::Higher),
    ];
    if with_oracle {
        cols.push(Column::new("Oracle F-ECE", Better::Lower));
    }
    cols
}

/// Builds a metrics table from per-seed predictions, with bootstrap p-values
/// against the `MLPlatt` row when present.
fn metrics_table(config: &ExperimentConfig, title: &str, key: &str, results: &[SeedResult]) -> Result<Table> {
    let with_oracle = results.iter().all(|r| r.test.has_ground_truth());
    let labels: Vec<String> = results[0].rows.iter().map(|r| r.label.clone()).collect();
    let mut evaluators: Vec<Vec<WeightedEvaluator>> = Vec::new();
    let mut values: Vec<Vec<Vec<f64>>> = vec![Vec::new(); labels.len()];
    for res in results {
        let mut evs = Vec::new();
        for (k, row) in res.rows.iter().enumerate() {
            let ev = WeightedEvaluator::with_ranking(&res.records, &row.preds, row.ranking.as_deref(), config.bins)
                .map_err(|e| e.in_stage("evaluate"))?;
            let mut v = ev.evaluate_full().to_vec();
            if with_oracle {
                v.push(oracle_f_ece(&row.preds, &res.test, config.bins).map_err(|e| e.in_stage("evaluate"))?);
            }
            values[k].push(v);
            evs.push(ev);
        }
        evaluators.push(evs);
    }
    let mut rows: Vec<Row> = labels
        .iter()
        .zip(values)
        .map(|(l, v)| Row::from_seeds(l.clone(), v))
        .collect();
    let reference = labels.iter().position(|l| l == REFERENCE);
    if let (Some(r), true) = (reference, rows.len() > 1) {
        let salt = config.hash_seed()?;
        for k in 0..rows.len() {
            if k == r {
                continue;
            }
            let pairs: Vec<(&WeightedEvaluator, &WeightedEvaluator)> =
                evaluators.iter().map(|evs| (&evs[k], &evs[r])).collect();
            let p = paired_bootstrap(&pairs, config.bootstrap_resamples, salt ^ BOOTSTRAP_SALT)
                .map_err(|e| e.in_stage("bootstrap"))?;
            rows[k].p_values = Some(p.to_vec());
        }
    }
    Ok(Table {
        title: title.into(),
        key: key.into(),
        columns: metric_columns(with_oracle),
        rows,
        reference: reference.map(|_| REFERENCE.to_string()),
        significance_level: config.significance_level,
    })
}

/// Every calibrator of the roster on a LambdaLoss-trained ranker.
pub fn run_benchmark(config: &ExperimentConfig) -> Result<RunOutput> {
    config.validate()?;
    let mut results = Vec::new();
    for &seed in &config.seeds {
        let data = prepare_seed(config, seed, RankingLoss::Lambda)?;
        let mut rows = Vec::new();
        for spec in &config.calibrators {
            let model = fit_calibrator(spec, &data.calibration, seed).map_err(|e| e.in_stage("calibrate"))?;
            rows.push(calibrated_row(spec.label(), model, &data.test_records)?);
        }
        results.push(SeedResult {
            seed,
            test: data.test,
            records: data.test_records,
            rows,
        });
    }
    let table = metrics_table(config, "Calibration benchmark", "bench", &results)?;
    write_outputs(config, "bench", table, &results)
}

/// The raw ranker, Platt, and MLPlatt with each component removed.
pub fn run_ablation(config: &ExperimentConfig) -> Result<RunOutput> {
    config.validate()?;
    let full = config.mlplatt();
    let no_context = MlplattConfig {
        context: ContextArch::Identity,
        ..full.clone()
    };
    let no_mono = MlplattConfig {
        mono_hidden: Vec::new(),
        ..full.clone()
    };
    let mut results = Vec::new();
    for &seed in &config.seeds {
        let data = prepare_seed(config, seed, RankingLoss::Lambda)?;
        let fit = |m: &MlplattConfig| {
            fit_mlplatt_logged(&data.calibration, m, seed).map_err(|e| e.in_stage("calibrate"))
        };
        let platt = FittedCalibrator::Platt(fit_platt(&data.calibration).map_err(|e| e.in_stage("calibrate"))?);
        let rows = vec![
            raw_row("Raw ranker", &data.test_records),
            calibrated_row("Platt", platt, &data.test_records)?,
            calibrated_row("No Context Model", fit(&no_context)?, &data.test_records)?,
            calibrated_row("No MonoMLP", fit(&no_mono)?, &data.test_records)?,
            calibrated_row(REFERENCE, fit(&full)?, &data.test_records)?,
        ];
        results.push(SeedResult {
            seed,
            test: data.test,
            records: data.test_records,
            rows,
        });
    }
    let table = metrics_table(config, "MLPlatt ablation", "ablation", &results)?;
    write_outputs(config, "ablation", table, &results)
}

/// Rankers trained with the RCR blend at each α, against LambdaLoss followed
/// by MLPlatt.
pub fn run_rcr_comparison(config: &ExperimentConfig) -> Result<RunOutput> {
    config.validate()?;
    if config.rcr_alphas.is_empty() {
        return Err(Error::config("rcr_alphas must not be empty"));
    }
    let mlplatt = config.mlplatt();
    let mut results = Vec::new();
    for &seed in &config.seeds {
        let data = load_dataset(&config.dataset, seed).map_err(|e| e.in_stage("data"))?;
        let lambda = prepare_from(config, &data, seed, RankingLoss::Lambda)?;
        let model = fit_mlplatt_logged(&lambda.calibration, &mlplatt, seed).map_err(|e| e.in_stage("calibrate"))?;
        let mut rows = Vec::new();
        for &alpha in &config.rcr_alphas {
            let rcr = prepare_from(config, &data, seed, RankingLoss::Rcr { alpha })?;
            let mut row = raw_row(&format!("RCR α={}", short_float(alpha)), &rcr.test_records);
            row.own_records = Some(rcr.test_records);
            rows.push(row);
        }
        rows.push(calibrated_row(REFERENCE, model, &lambda.test_records)?);
        results.push(SeedResult {
            seed,
            test: lambda.test,
            records: lambda.test_records,
            rows,
        });
    }
    let table = metrics_table(config, "Regression-compatible ranking vs MLPlatt", "rcr", &results)?;
    write_outputs(config, "rcr", table, &results)
}

/// Misordered listing fraction of MLPlatt for each penalty weight.
pub fn run_theta_sweep(config: &ExperimentConfig) -> Result<RunOutput> {
    config.validate()?;
    if config.thetas.is_empty() {
        return Err(Error::config("the theta list is empty"));
    }
    let base = config.mlplatt();
    let mut per_theta: Vec<Vec<Vec<f64>>> = vec![Vec::new(); config.thetas.len()];
    let mut results = Vec::new();
    for &seed in &config.seeds {
        let mut data = prepare_seed(config, seed, RankingLoss::Lambda)?;
        data.test.listings.truncate(config.theta_sample);
        let n: usize = data.test.item_count();
        data.test_records.truncate(n);
        let raw: Vec<f64> = data.test_records.iter().map(|r| r.r).collect();
        let ids: Vec<u64> = data.test_records.iter().map(|r| r.listing).collect();
        let mut rows = Vec::new();
        for (k, &theta) in config.thetas.iter().enumerate() {
            let m = MlplattConfig { theta, ..base.clone() };
            let row = calibrated_row(
                &format!("θ={}", short_float(theta)),
                fit_mlplatt_logged(&data.calibration, &m, seed).map_err(|e| e.in_stage("calibrate"))?,
                &data.test_records,
            )?;
            let mis = misordered_fraction(&raw, &row.preds, &ids, MISORDER_THRESHOLD)
                .map_err(|e| e.in_stage("evaluate"))?;
            let ece = MetricsReport::evaluate(&data.test_records, &row.preds, config.bins)
                .map_err(|e| e.in_stage("evaluate"))?
                .f_ece;
            per_theta[k].push(vec![mis, ece]);
            rows.push(row);
        }
        results.push(SeedResult {
            seed,
            test: data.test,
            records: data.test_records,
            rows,
        });
    }
    let rows = config
        .thetas
        .iter()
        .zip(per_theta)
        .map(|(&t, v)| Row::from_seeds(format!("θ={}", short_float(t)), v))
        .collect();
    let table = Table {
        title: "Monotonicity penalty sweep".into(),
        key: "theta_sweep".into(),
        columns: vec![Column::new("Misordered", Better::Neither), Column::new("F-ECE", Better::Neither)],
        rows,
        reference: None,
        significance_level: config.significance_level,
    };
    write_outputs(config, "theta-sweep", table, &results)
}
