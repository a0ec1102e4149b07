//! WebAssembly entry points for the browser demo.
//!
//! Each operation returns a JSON document for the page to plot. The plain
//! Rust functions behind them are public so they can be tested natively.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use wasm_bindgen::prelude::*;

use mlplatt::calibrators::{
    fit_mlplatt_with_report, fit_platt, CalibrationRecord, Calibrator, MlplattConfig,
};
use mlplatt::datagen::{generate, oracle_f_ece, GeneratorConfig};
use mlplatt::dataio::{build_calibration_set, split, ContextSource, Dataset};
use mlplatt::metrics::{
    ece_at_m, f_ece, log_loss, misordered_fraction, reliability_curve, FieldPartition, MISORDER_THRESHOLD,
};
use mlplatt::nn::{logit, sigmoid};
use mlplatt::ranker::{train_ranker, RankerConfig, RankerModel};
use mlplatt::Result;

#[derive(Debug, Clone, Serialize)]
pub struct CurvePoint {
    pub x: f64,
    pub y: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct Curve {
    pub label: String,
    pub points: Vec<CurvePoint>,
}

#[derive(Debug, Clone, Serialize)]
pub struct MethodSummary {
    pub label: String,
    pub f_ece: f64,
    pub oracle_f_ece: f64,
    pub log_loss: f64,
    /// Reliability curve per field value: mean prediction against click rate.
    pub curves: Vec<Curve>,
}

#[derive(Debug, Clone, Serialize)]
pub struct ReliabilityReport {
    pub fields: usize,
    pub test_rows: usize,
    pub methods: Vec<MethodSummary>,
}

struct Prepared {
    test: Dataset,
    train_records: Vec<CalibrationRecord>,
    test_records: Vec<CalibrationRecord>,
}

fn prepare(generator: &GeneratorConfig, seed: u64) -> Result<Prepared> {
    let data = generate(&GeneratorConfig {
        seed,
        ..generator.clone()
    })?;
    let (train, test) = split(&data, 1.0 / 3.0, seed)?;
    let ranker: RankerModel = train_ranker(
        &train,
        &RankerConfig {
            epochs: 3,
            seed,
            ..RankerConfig::default()
        },
    )?;
    Ok(Prepared {
        train_records: build_calibration_set(&ranker, &train, ContextSource::Raw)?,
        test_records: build_calibration_set(&ranker, &test, ContextSource::Raw)?,
        test,
    })
}

fn curves_by_field(records: &[CalibrationRecord], preds: &[f64], bins: usize) -> Result<Vec<Curve>> {
    let mut fields: Vec<u32> = records.iter().map(|r| r.field).collect();
    fields.sort_unstable();
    fields.dedup();
    fields
        .into_iter()
        .map(|z| {
            let (p, y): (Vec<f64>, Vec<bool>) = records
                .iter()
                .zip(preds)
                .filter(|(r, _)| r.field == z)
                .map(|(r, &p)| (p, r.click))
                .unzip();
            let points = reliability_curve(&p, &y, bins)?
                .into_iter()
                .map(|b| CurvePoint {
                    x: b.mean_pred,
                    y: b.rate,
                })
                .collect();
            Ok(Curve {
                label: format!("field {z}"),
                points,
            })
        })
        .collect()
}

fn summarise(label: &str, p: &Prepared, preds: &[f64], bins: usize) -> Result<MethodSummary> {
    let labels: Vec<bool> = p.test_records.iter().map(|r| r.click).collect();
    let partition = FieldPartition::from_records("field", &p.test_records);
    Ok(MethodSummary {
        label: label.into(),
        f_ece: f_ece(preds, &labels, &partition, bins)?.f_ece,
        oracle_f_ece: oracle_f_ece(preds, &p.test, bins)?,
        log_loss: log_loss(preds, &labels)?,
        curves: curves_by_field(&p.test_records, preds, bins)?,
    })
}

/// Platt scaling against MLPlatt on generated listings with field offsets.
pub fn reliability(seed: u64, listings: usize, bins: usize, epochs: usize) -> Result<ReliabilityReport> {
    let generator = GeneratorConfig {
        listings,
        ..GeneratorConfig::default()
    };
    let p = prepare(&generator, seed)?;
    let platt = fit_platt(&p.train_records)?.predict_all(&p.test_records)?;
    let config = MlplattConfig {
        epochs,
        batch_size: 256,
        seed,
        ..MlplattConfig::default()
    };
    let (model, _) = fit_mlplatt_with_report(&p.train_records, &config)?;
    let ml = model.predict_all(&p.test_records)?;
    Ok(ReliabilityReport {
        fields: generator.fields(),
        test_rows: p.test_records.len(),
        methods: vec![summarise("Platt", &p, &platt, bins)?, summarise("MLPlatt", &p, &ml, bins)?],
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct ThetaReport {
    pub theta: f64,
    pub misordered_fraction: f64,
    pub violation_rate: f64,
    pub f_ece: f64,
    /// Calibrated probability against ranker score, one curve per field value
    /// with the continuous context at zero.
    pub response: Vec<Curve>,
}

/// MLPlatt fitted with penalty weight `theta` on listings where item
/// relevance is weak, so an unpenalised head is free to bend.
pub fn theta_explorer(seed: u64, theta: f64, listings: usize, epochs: usize) -> Result<ThetaReport> {
    let base = GeneratorConfig::default();
    let generator = GeneratorConfig {
        listings,
        item_weights: base.item_weights.iter().map(|w| 0.1 * w).collect(),
        ..base
    };
    let p = prepare(&generator, seed)?;
    let config = MlplattConfig {
        theta,
        epochs,
        batch_size: 256,
        plateau_tolerance: f64::NEG_INFINITY,
        seed,
        ..MlplattConfig::default()
    };
    let (model, report) = fit_mlplatt_with_report(&p.train_records, &config)?;
    let preds = model.predict_all(&p.test_records)?;
    let raw: Vec<f64> = p.test_records.iter().map(|r| r.r).collect();
    let ids: Vec<u64> = p.test_records.iter().map(|r| r.listing).collect();
    let labels: Vec<bool> = p.test_records.iter().map(|r| r.click).collect();
    let (lo, hi) = raw.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &r| (a.min(r), b.max(r)));
    let continuous = generator.ctx_weights.len();
    let mut response = Vec::new();
    for z in 0..generator.fields() {
        let mut ctx = vec![0.0; generator.ctx_dim()];
        ctx[continuous + z] = 1.0;
        let points = (0..=60)
            .map(|k| {
                let r = lo + (hi - lo) * k as f64 / 60.0;
                model.apply(r, &ctx).map(|c| CurvePoint { x: r, y: c })
            })
            .collect::<Result<Vec<_>>>()?;
        response.push(Curve {
            label: format!("field {z}"),
            points,
        });
    }
    Ok(ThetaReport {
        theta,
        misordered_fraction: misordered_fraction(&raw, &preds, &ids, MISORDER_THRESHOLD)?,
        violation_rate: report.violation_rate,
        f_ece: f_ece(&preds, &labels, &FieldPartition::from_records("field", &p.test_records), 20)?.f_ece,
        response,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct EceReport {
    pub ece: f64,
    pub bins: Vec<EceBin>,
}

#[derive(Debug, Clone, Serialize)]
pub struct EceBin {
    pub count: usize,
    pub mean_pred: f64,
    pub rate: f64,
    pub gap: f64,
}

/// ECE of a distorted predictor on outcomes drawn from known probabilities:
/// the prediction is `σ(logit(p) / temperature + shift)`.
pub fn ece_explorer(seed: u64, rows: usize, temperature: f64, shift: f64, bins: usize) -> Result<EceReport> {
    if !(temperature > 0.0 && temperature.is_finite() && shift.is_finite()) {
        return Err(mlplatt::Error::Input("temperature must be positive and shift finite".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut preds = Vec::with_capacity(rows);
    let mut labels = Vec::with_capacity(rows);
    for _ in 0..rows {
        let p: f64 = rng.random_range(0.02..0.98);
        labels.push(rng.random::<f64>() < p);
        preds.push(sigmoid(logit(p) / temperature + shift));
    }
    let curve = reliability_curve(&preds, &labels, bins)?;
    Ok(EceReport {
        ece: ece_at_m(&preds, &labels, bins)?,
        bins: curve
            .into_iter()
            .map(|b| EceBin {
                count: b.count,
                mean_pred: b.mean_pred,
                rate: b.rate,
                gap: b.rate - b.mean_pred,
            })
            .collect(),
    })
}

fn to_js<T: Serialize>(value: Result<T>) -> std::result::Result<String, JsValue> {
    let value = value.map_err(|e| JsValue::from_str(&e.to_string()))?;
    serde_json::to_string(&value).map_err(|e| JsValue::from_str(&e.to_string()))
}

#[wasm_bindgen(js_name = reliability)]
pub fn reliability_js(seed: u32, listings: u32, bins: u32, epochs: u32) -> std::result::Result<String, JsValue> {
    to_js(reliability(u64::from(seed), listings as usize, bins as usize, epochs as usize))
}

#[wasm_bindgen(js_name = thetaExplorer)]
pub fn theta_explorer_js(seed: u32, theta: f64, listings: u32, epochs: u32) -> std::result::Result<String, JsValue> {
    to_js(theta_explorer(u64::from(seed), theta, listings as usize, epochs as usize))
}

#[wasm_bindgen(js_name = eceExplorer)]
pub fn ece_explorer_js(seed: u32, rows: u32, temperature: f64, shift: f64, bins: u32) -> std::result::Result<String, JsValue> {
    to_js(ece_explorer(u64::from(seed), rows as usize, temperature, shift, bins as usize))
}
