use super::{check_both_classes, CalibrationRecord, Calibrator};
use crate::container::{Decoder, Encoder, ModelKind, Persist};
use crate::{Error, Result};

/// Weighted least-squares projection of `values` onto non-decreasing
/// sequences (pool adjacent violators).
pub fn pava(values: &[f64], weights: &[f64]) -> Result<Vec<f64>> {
    if values.is_empty() {
        return Err(Error::input("pava needs at least one value"));
    }
    if values.len() != weights.len() {
        return Err(Error::Dimension(format!(
            "{} values for {} weights",
            values.len(),
            weights.len()
        )));
    }
    if weights.iter().any(|&w| !(w > 0.0 && w.is_finite())) {
        return Err(Error::input("pava weights must be positive and finite"));
    }
    // Blocks of (weighted mean, total weight, length).
    let mut blocks: Vec<(f64, f64, usize)> = Vec::with_capacity(values.len());
    for (&v, &w) in values.iter().zip(weights) {
        let mut cur = (v, w, 1usize);
        while let Some(&(mean, weight, len)) = blocks.last() {
            if mean <= cur.0 {
                break;
            }
            blocks.pop();
            let total = weight + cur.1;
            cur = ((mean * weight + cur.0 * cur.1) / total, total, len + cur.2);
        }
        blocks.push(cur);
    }
    let mut out = Vec::with_capacity(values.len());
    for (mean, _, len) in blocks {
        out.extend(std::iter::repeat_n(mean, len));
    }
    Ok(out)
}

/// Piecewise-linear isotonic calibration curve over binned ranker scores.
#[derive(Debug, Clone, PartialEq)]
pub struct SmoothedIsotonicModel {
    knots: Vec<(f64, f64)>,
}

impl SmoothedIsotonicModel {
    pub fn from_knots(knots: Vec<(f64, f64)>) -> Result<Self> {
        if knots.is_empty() {
            return Err(Error::input("isotonic model needs at least one knot"));
        }
        for w in knots.windows(2) {
            if !(w[0].0 < w[1].0) {
                return Err(Error::input("knot scores must be strictly ascending"));
            }
            if w[0].1 > w[1].1 {
                return Err(Error::input("knot probabilities must be non-decreasing"));
            }
        }
        if knots.iter().any(|&(s, p)| !s.is_finite() || !(0.0..=1.0).contains(&p)) {
            return Err(Error::input("knots must be finite probabilities"));
        }
        Ok(Self { knots })
    }

    pub fn knots(&self) -> &[(f64, f64)] {
        &self.knots
    }

    /// Linear interpolation between knots, clamped to the end knots outside.
    pub fn apply(&self, r: f64) -> f64 {
        let k = &self.knots;
        let last = k.len() - 1;
        if r <= k[0].0 {
            return k[0].1;
        }
        if r >= k[last].0 {
            return k[last].1;
        }
        let j = k.partition_point(|&(s, _)| s <= r);
        let (x0, y0) = k[j - 1];
        let (x1, y1) = k[j];
        y0 + (y1 - y0) * (r - x0) / (x1 - x0)
    }
}

impl Calibrator for SmoothedIsotonicModel {
    fn predict(&self, record: &CalibrationRecord) -> Result<f64> {
        Ok(self.apply(record.r))
    }
}

/// Bins records into `bins` equal-frequency score bins, runs PAVA over per-bin
/// click rates weighted by bin size, and keeps `(mean score, fitted rate)`
/// knots.
pub fn fit_smoothed_isotonic(
    records: &[CalibrationRecord],
    bins: usize,
) -> Result<SmoothedIsotonicModel> {
    if bins < 2 {
        return Err(Error::config("smoothed isotonic needs at least two bins"));
    }
    check_both_classes(records)?;
    let mut rows: Vec<(f64, f64)> = records.iter().map(|r| (r.r, r.label())).collect();
    if rows.iter().any(|r| !r.0.is_finite()) {
        return Err(Error::Fit("non-finite ranker score".into()));
    }
    rows.sort_by(|a, b| a.0.total_cmp(&b.0));
    let distinct = 1 + rows.windows(2).filter(|w| w[0].0 != w[1].0).count();
    let bins = if distinct < bins {
        log::warn!("only {distinct} distinct scores; reducing bins from {bins} to {distinct}");
        distinct
    } else {
        bins
    };

    let n = rows.len();
    let (base, extra) = (n / bins, n % bins);
    let mut summaries: Vec<(f64, f64, f64)> = Vec::with_capacity(bins);
    let mut start = 0;
    for m in 0..bins {
        let len = base + usize::from(m < extra);
        let chunk = &rows[start..start + len];
        start += len;
        let w = len as f64;
        let mean_r = chunk.iter().map(|r| r.0).sum::<f64>() / w;
        let rate = chunk.iter().map(|r| r.1).sum::<f64>() / w;
        match summaries.last_mut() {
            // Tied scores across a bin boundary can produce equal means.
            Some(prev) if prev.0 >= mean_r => {
                let total = prev.2 + w;
                *prev = (
                    (prev.0 * prev.2 + mean_r * w) / total,
                    (prev.1 * prev.2 + rate * w) / total,
                    total,
                );
            }
            _ => summaries.push((mean_r, rate, w)),
        }
    }
    let rates: Vec<f64> = summaries.iter().map(|s| s.1).collect();
    let weights: Vec<f64> = summaries.iter().map(|s| s.2).collect();
    let fitted = pava(&rates, &weights)?;
    let knots = summaries
        .iter()
        .zip(fitted)
        .map(|(s, p)| (s.0, p.clamp(0.0, 1.0)))
        .collect();
    SmoothedIsotonicModel::from_knots(knots)
}

impl Persist for SmoothedIsotonicModel {
    const KIND: ModelKind = ModelKind::SmoothedIsotonic;

    fn encode_payload(&self, enc: &mut Encoder) {
        enc.len_prefix(self.knots.len());
        for &(s, p) in &self.knots {
            enc.f64(s);
            enc.f64(p);
        }
    }

    fn decode_payload(dec: &mut Decoder<'_>) -> Result<Self> {
        let n = dec.len_prefix()?;
        let flat = dec.f64s(n.saturating_mul(2))?;
        Self::from_knots(flat.chunks_exact(2).map(|c| (c[0], c[1])).collect())
            .map_err(|e| Error::Container(e.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn record(r: f64, click: bool) -> CalibrationRecord {
        CalibrationRecord {
            r,
            ctx: Vec::new(),
            field: 0,
            click,
            listing: 0,
        }
    }

    #[test]
    fn pava_examples() {
        assert_eq!(pava(&[1.0, 2.0, 3.0], &[1.0; 3]).unwrap(), vec![1.0, 2.0, 3.0]);
        assert_eq!(pava(&[1.0, 3.0, 2.0], &[1.0; 3]).unwrap(), vec![1.0, 2.5, 2.5]);
        assert_eq!(pava(&[3.0, 1.0], &[1.0, 3.0]).unwrap(), vec![1.5, 1.5]);
    }

    #[test]
    fn pava_errors() {
        assert!(pava(&[], &[]).is_err());
        assert!(pava(&[1.0], &[0.0]).is_err());
        assert!(pava(&[1.0, 2.0], &[1.0]).is_err());
    }

    #[test]
    fn calibrated_data_gives_near_identity_curve() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let records: Vec<_> = (0..100_000)
            .map(|_| {
                let p: f64 = rng.random();
                record(p, rng.random::<f64>() < p)
            })
            .collect();
        let model = fit_smoothed_isotonic(&records, 20).unwrap();
        let tolerance = 2.0 / (100_000f64 / 20.0).sqrt();
        for &(s, p) in model.knots() {
            assert!((s - p).abs() < tolerance, "knot ({s}, {p})");
        }
        for q in [0.1, 0.33, 0.5, 0.77, 0.9] {
            assert!((model.apply(q) - q).abs() < tolerance);
        }
    }

    #[test]
    fn anti_monotone_labels_pool_to_base_rate() {
        let records: Vec<_> = (0..1000).map(|i| record(i as f64, i < 250)).collect();
        let model = fit_smoothed_isotonic(&records, 10).unwrap();
        for x in [-5.0, 0.0, 500.0, 2000.0] {
            assert!((model.apply(x) - 0.25).abs() < 1e-12);
        }
    }

    #[test]
    fn clamps_outside_knot_range() {
        let model = SmoothedIsotonicModel::from_knots(vec![(0.0, 0.1), (1.0, 0.3), (2.0, 0.9)]).unwrap();
        assert_eq!(model.apply(-10.0), 0.1);
        assert_eq!(model.apply(10.0), 0.9);
        assert!((model.apply(0.5) - 0.2).abs() < 1e-15);
        assert!((model.apply(1.5) - 0.6).abs() < 1e-15);
    }

    #[test]
    fn few_distinct_scores_reduce_bins() {
        let records: Vec<_> = (0..100).map(|i| record((i % 3) as f64, i % 2 == 0)).collect();
        let model = fit_smoothed_isotonic(&records, 10).unwrap();
        assert!(model.knots().len() <= 3);
        assert!(fit_smoothed_isotonic(&records, 1).is_err());
    }

    #[test]
    fn round_trip() {
        let model = SmoothedIsotonicModel::from_knots(vec![(0.0, 0.1), (1.5, 0.2)]).unwrap();
        assert_eq!(
            SmoothedIsotonicModel::from_bytes(&model.to_bytes()).unwrap(),
            model
        );
    }

    proptest! {
        #[test]
        fn fitted_curve_is_monotone(
            rows in proptest::collection::vec((-3.0f64..3.0, any::<bool>()), 10..300),
            bins in 2usize..30,
        ) {
            let mut records: Vec<_> = rows.iter().map(|&(r, c)| record(r, c)).collect();
            records[0].click = true;
            records[1].click = false;
            let model = fit_smoothed_isotonic(&records, bins).unwrap();
            let mut prev = f64::NEG_INFINITY;
            for k in 0..=400 {
                let c = model.apply(-4.0 + 8.0 * k as f64 / 400.0);
                prop_assert!(c >= prev - 1e-15);
                prop_assert!((0.0..=1.0).contains(&c));
                prev = c;
            }
        }
    }
}
