use std::collections::BTreeMap;

use statrs::distribution::{ContinuousCDF, Normal};

use super::{check_both_classes, fit_platt, CalibrationRecord, Calibrator, PlattModel};
use crate::container::{Decoder, Encoder, ModelKind, Persist};
use crate::nn::BCE_EPSILON;
use crate::{Error, Result};

/// Wilson score interval for `positives` successes out of `total` trials.
pub fn wilson_interval(positives: u64, total: u64, level: f64) -> Result<(f64, f64)> {
    if total == 0 || positives > total {
        return Err(Error::input(format!(
            "invalid counts {positives}/{total} for a Wilson interval"
        )));
    }
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::config(format!("confidence level {level} not in (0, 1)")));
    }
    let z = Normal::standard().inverse_cdf(0.5 + level / 2.0);
    let n = total as f64;
    let p = positives as f64 / n;
    let z2 = z * z;
    let denom = 1.0 + z2 / n;
    let center = (p + z2 / (2.0 * n)) / denom;
    let half = z / denom * (p * (1.0 - p) / n + z2 / (4.0 * n * n)).sqrt();
    Ok(((center - half).max(0.0), (center + half).min(1.0)))
}

/// Per-field statistics and the multiplicative correction applied to that field.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FieldEntry {
    pub positives: u64,
    pub total: u64,
    pub interval: (f64, f64),
    pub scale: f64,
}

impl FieldEntry {
    fn fit(positives: u64, total: u64, base_mean: f64, level: f64) -> Result<Self> {
        let interval = wilson_interval(positives, total, level)?;
        let (lo, hi) = interval;
        let target = if base_mean < lo {
            lo
        } else if base_mean > hi {
            hi
        } else {
            base_mean
        };
        let scale = if target == base_mean || base_mean <= 0.0 {
            1.0
        } else {
            let delta = target / base_mean - 1.0;
            1.0 + delta / (1.0 + delta.abs())
        };
        Ok(Self {
            positives,
            total,
            interval,
            scale,
        })
    }
}

/// Field-wise correction of an already calibrated probability.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfCalibModel {
    pub level: f64,
    pub fields: BTreeMap<u32, FieldEntry>,
    pub global: FieldEntry,
}

impl ConfCalibModel {
    pub fn entry(&self, field: u32) -> &FieldEntry {
        self.fields.get(&field).unwrap_or(&self.global)
    }
}

/// Fits per-field Wilson intervals and scale factors. `base` holds the base
/// calibrator's prediction for each record.
pub fn fit_confcalib(
    records: &[CalibrationRecord],
    base: &[f64],
    level: f64,
) -> Result<ConfCalibModel> {
    check_both_classes(records)?;
    if base.len() != records.len() {
        return Err(Error::Dimension(format!(
            "{} base predictions for {} records",
            base.len(),
            records.len()
        )));
    }
    // field -> (positives, total, sum of base predictions)
    let mut stats: BTreeMap<u32, (u64, u64, f64)> = BTreeMap::new();
    for (rec, &p) in records.iter().zip(base) {
        let e = stats.entry(rec.field).or_default();
        e.0 += u64::from(rec.click);
        e.1 += 1;
        e.2 += p;
    }
    let mut fields = BTreeMap::new();
    let (mut pos, mut tot, mut sum) = (0u64, 0u64, 0.0);
    for (&z, &(p, n, s)) in &stats {
        fields.insert(z, FieldEntry::fit(p, n, s / n as f64, level)?);
        pos += p;
        tot += n;
        sum += s;
    }
    let global = FieldEntry::fit(pos, tot, sum / tot as f64, level)?;
    Ok(ConfCalibModel {
        level,
        fields,
        global,
    })
}

pub fn apply_confcalib(model: &ConfCalibModel, base: f64, field: u32) -> f64 {
    let s = model.entry(field).scale;
    if s == 1.0 {
        base
    } else {
        (s * base).clamp(BCE_EPSILON, 1.0 - BCE_EPSILON)
    }
}

/// Platt scaling followed by the field-wise correction.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfCalibPipeline {
    pub base: PlattModel,
    pub conf: ConfCalibModel,
}

impl ConfCalibPipeline {
    pub fn fit(records: &[CalibrationRecord], level: f64) -> Result<Self> {
        let base = fit_platt(records)?;
        let preds = base.predict_all(records)?;
        let conf = fit_confcalib(records, &preds, level)?;
        Ok(Self { base, conf })
    }
}

impl Calibrator for ConfCalibPipeline {
    fn predict(&self, record: &CalibrationRecord) -> Result<f64> {
        Ok(apply_confcalib(
            &self.conf,
            self.base.predict(record)?,
            record.field,
        ))
    }
}

fn encode_entry(enc: &mut Encoder, e: &FieldEntry) {
    enc.u64(e.positives);
    enc.u64(e.total);
    enc.f64(e.interval.0);
    enc.f64(e.interval.1);
    enc.f64(e.scale);
}

fn decode_entry(dec: &mut Decoder<'_>) -> Result<FieldEntry> {
    let e = FieldEntry {
        positives: dec.u64()?,
        total: dec.u64()?,
        interval: (dec.f64()?, dec.f64()?),
        scale: dec.f64()?,
    };
    if e.positives > e.total || !(e.scale > 0.0) {
        return Err(Error::Container("invalid field entry".into()));
    }
    Ok(e)
}

impl Persist for ConfCalibPipeline {
    const KIND: ModelKind = ModelKind::ConfCalib;

    fn encode_payload(&self, enc: &mut Encoder) {
        self.base.encode_payload(enc);
        enc.f64(self.conf.level);
        encode_entry(enc, &self.conf.global);
        enc.len_prefix(self.conf.fields.len());
        for (&z, e) in &self.conf.fields {
            enc.u32(z);
            encode_entry(enc, e);
        }
    }

    fn decode_payload(dec: &mut Decoder<'_>) -> Result<Self> {
        let base = PlattModel::decode_payload(dec)?;
        let level = dec.f64()?;
        let global = decode_entry(dec)?;
        let n = dec.len_prefix()?;
        let mut fields = BTreeMap::new();
        for _ in 0..n {
            let z = dec.u32()?;
            fields.insert(z, decode_entry(dec)?);
        }
        Ok(Self {
            base,
            conf: ConfCalibModel {
                level,
                fields,
                global,
            },
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn records(field: u32, positives: usize, total: usize) -> Vec<CalibrationRecord> {
        (0..total)
            .map(|i| CalibrationRecord {
                r: i as f64,
                ctx: Vec::new(),
                field,
                click: i < positives,
                listing: i as u64,
            })
            .collect()
    }

    /// Wilson bounds written out directly, with z for 95% hard-coded.
    fn wilson_reference(k: f64, n: f64) -> (f64, f64) {
        let z: f64 = 1.959_963_984_540_054;
        let p = k / n;
        let a = p + z * z / (2.0 * n);
        let b = z * (p * (1.0 - p) / n + z * z / (4.0 * n * n)).sqrt();
        let c = 1.0 + z * z / n;
        ((a - b) / c, (a + b) / c)
    }

    #[test]
    fn wilson_matches_reference() {
        for (k, n) in [(3, 10), (0, 7), (7, 7), (300, 1000), (1, 2)] {
            let (lo, hi) = wilson_interval(k, n, 0.95).unwrap();
            let (rlo, rhi) = wilson_reference(k as f64, n as f64);
            assert!((lo - rlo.max(0.0)).abs() < 1e-12 && (hi - rhi.min(1.0)).abs() < 1e-12);
        }
        assert!(wilson_interval(0, 0, 0.95).is_err());
        assert!(wilson_interval(1, 2, 1.0).is_err());
    }

    #[test]
    fn inside_interval_leaves_predictions_unchanged() {
        let recs = records(0, 30, 100);
        let model = fit_confcalib(&recs, &vec![0.3; 100], 0.95).unwrap();
        assert_eq!(model.entry(0).scale, 1.0);
        assert_eq!(apply_confcalib(&model, 0.3, 0), 0.3);
        assert_eq!(apply_confcalib(&model, 0.123, 0), 0.123);
    }

    #[test]
    fn underpredicted_field_is_scaled_toward_bound() {
        let n = 1_000_000;
        let recs = records(0, 300_000, n);
        let model = fit_confcalib(&recs, &vec![0.1; n], 0.95).unwrap();
        let (lo, _) = wilson_reference(300_000.0, n as f64);
        assert!((model.entry(0).interval.0 - lo).abs() < 1e-12);
        let delta = lo / 0.1 - 1.0;
        let expected = 0.1 * (1.0 + delta / (1.0 + delta));
        let c = apply_confcalib(&model, 0.1, 0);
        assert!((c - expected).abs() < 1e-12);
        assert!(c > 0.1 && c < lo);
    }

    #[test]
    fn unseen_field_uses_global_entry() {
        let mut recs = records(0, 10, 100);
        recs.extend(records(1, 80, 100));
        let base = vec![0.45; 200];
        let model = fit_confcalib(&recs, &base, 0.95).unwrap();
        assert_eq!(model.entry(7), &model.global);
        assert_eq!(model.global.total, 200);
        assert_eq!(model.global.positives, 90);
        assert_eq!(apply_confcalib(&model, 0.45, 7), 0.45);
        assert!(apply_confcalib(&model, 0.45, 0) < 0.45);
        assert!(apply_confcalib(&model, 0.45, 1) > 0.45);
    }

    #[test]
    fn outputs_stay_inside_unit_interval() {
        let recs = records(0, 95, 100);
        let model = fit_confcalib(&recs, &vec![0.2; 100], 0.95).unwrap();
        let c = apply_confcalib(&model, 0.9, 0);
        assert!(c > 0.0 && c < 1.0);
    }

    #[test]
    fn pipeline_round_trip() {
        let mut recs = records(0, 10, 50);
        recs.extend(records(2, 40, 50));
        let model = ConfCalibPipeline::fit(&recs, 0.9).unwrap();
        let back = ConfCalibPipeline::from_bytes(&model.to_bytes()).unwrap();
        assert_eq!(back, model);
    }
}
