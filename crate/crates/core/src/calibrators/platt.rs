use super::{check_both_classes, CalibrationRecord, Calibrator};
use crate::container::{Decoder, Encoder, ModelKind, Persist};
use crate::nn::{logit, sigmoid};
use crate::{Error, Result};

const MAX_ITERATIONS: usize = 10_000;
const GRAD_TOLERANCE: f64 = 1e-8;

/// Logistic calibration `c = σ(a·r + b)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlattModel {
    pub a: f64,
    pub b: f64,
    /// Set when the scores carry no information (constant `r`), in which
    /// case `a = 0` and `b` is the log-odds of the base rate.
    pub degenerate: bool,
}

impl PlattModel {
    pub fn new(a: f64, b: f64) -> Self {
        Self {
            a,
            b,
            degenerate: false,
        }
    }
}

pub fn apply_platt(model: &PlattModel, r: f64) -> f64 {
    sigmoid(model.a * r + model.b)
}

impl Calibrator for PlattModel {
    fn predict(&self, record: &CalibrationRecord) -> Result<f64> {
        Ok(apply_platt(self, record.r))
    }
}

/// Mean BCE of `σ(a·r + b)` in logit form, its gradient and Hessian.
fn objective(scores: &[f64], labels: &[f64], a: f64, b: f64) -> (f64, [f64; 2], [f64; 3]) {
    let n = scores.len() as f64;
    let mut loss = 0.0;
    let (mut ga, mut gb) = (0.0, 0.0);
    let (mut haa, mut hab, mut hbb) = (0.0, 0.0, 0.0);
    for (&r, &y) in scores.iter().zip(labels) {
        let u = a * r + b;
        loss += if u > 0.0 {
            u + (-u).exp().ln_1p()
        } else {
            u.exp().ln_1p()
        } - y * u;
        let p = sigmoid(u);
        let e = p - y;
        ga += e * r;
        gb += e;
        let w = p * (1.0 - p);
        haa += w * r * r;
        hab += w * r;
        hbb += w;
    }
    (
        loss / n,
        [ga / n, gb / n],
        [haa / n, hab / n, hbb / n],
    )
}

/// Maximum-likelihood Platt fit by damped Newton iterations.
pub fn fit_platt(records: &[CalibrationRecord]) -> Result<PlattModel> {
    let rate = check_both_classes(records)?;
    let scores: Vec<f64> = records.iter().map(|r| r.r).collect();
    if scores.iter().any(|r| !r.is_finite()) {
        return Err(Error::Fit("non-finite ranker score".into()));
    }
    let labels: Vec<f64> = records.iter().map(CalibrationRecord::label).collect();
    if scores.iter().all(|&r| r == scores[0]) {
        log::warn!("constant ranker scores: Platt slope is unidentifiable");
        return Ok(PlattModel {
            a: 0.0,
            b: logit(rate),
            degenerate: true,
        });
    }

    let (mut a, mut b) = (0.0, logit(rate));
    let (mut loss, mut grad, mut hess) = objective(&scores, &labels, a, b);
    for _ in 0..MAX_ITERATIONS {
        if grad[0].hypot(grad[1]) < GRAD_TOLERANCE {
            break;
        }
        let [haa, hab, hbb] = hess;
        let ridge = 1e-12 * (haa + hbb).max(1e-300);
        let (haa, hbb) = (haa + ridge, hbb + ridge);
        let det = haa * hbb - hab * hab;
        let (da, db) = if det > 0.0 && det.is_finite() {
            (
                -(hbb * grad[0] - hab * grad[1]) / det,
                -(haa * grad[1] - hab * grad[0]) / det,
            )
        } else {
            (-grad[0], -grad[1])
        };
        // Backtrack until the loss does not increase.
        let mut step = 1.0;
        let mut accepted = false;
        for _ in 0..60 {
            let (na, nb) = (a + step * da, b + step * db);
            let (nl, ng, nh) = objective(&scores, &labels, na, nb);
            if nl.is_finite() && nl <= loss {
                a = na;
                b = nb;
                loss = nl;
                grad = ng;
                hess = nh;
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        if !accepted {
            break;
        }
    }
    Ok(PlattModel::new(a, b))
}

impl Persist for PlattModel {
    const KIND: ModelKind = ModelKind::Platt;

    fn encode_payload(&self, enc: &mut Encoder) {
        enc.f64(self.a);
        enc.f64(self.b);
        enc.u8(u8::from(self.degenerate));
    }

    fn decode_payload(dec: &mut Decoder<'_>) -> Result<Self> {
        let a = dec.f64()?;
        let b = dec.f64()?;
        let degenerate = match dec.u8()? {
            0 => false,
            1 => true,
            t => return Err(Error::Container(format!("bad degeneracy flag {t}"))),
        };
        Ok(Self { a, b, degenerate })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn record(r: f64, click: bool) -> CalibrationRecord {
        CalibrationRecord {
            r,
            ctx: Vec::new(),
            field: 0,
            click,
            listing: 0,
        }
    }

    fn bernoulli_records(a: f64, b: f64, n: usize, seed: u64) -> Vec<CalibrationRecord> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                let r: f64 = rng.sample(StandardNormal);
                let p = sigmoid(a * r + b);
                record(r, rng.random::<f64>() < p)
            })
            .collect()
    }

    #[test]
    fn apply_examples() {
        assert_eq!(apply_platt(&PlattModel::new(1.0, 0.0), 0.0), 0.5);
        assert_eq!(apply_platt(&PlattModel::new(2.0, 1.0), -0.5), 0.5);
        let v = apply_platt(&PlattModel::new(1.0, 0.0), 2.0);
        assert!((v - 0.880_797_077_977_882_3).abs() < 1e-12);
    }

    #[test]
    fn recovers_generating_parameters() {
        let m = fit_platt(&bernoulli_records(2.0, 1.0, 100_000, 1)).unwrap();
        assert!((m.a - 2.0).abs() < 0.1 && (m.b - 1.0).abs() < 0.1, "{m:?}");
        let m = fit_platt(&bernoulli_records(1.0, 0.0, 100_000, 2)).unwrap();
        assert!((m.a - 1.0).abs() < 0.1 && m.b.abs() < 0.1, "{m:?}");
        assert!(m.a > 0.0);
    }

    #[test]
    fn converged_fit_has_vanishing_gradient() {
        let records = bernoulli_records(-0.7, 0.3, 5_000, 3);
        let m = fit_platt(&records).unwrap();
        let scores: Vec<f64> = records.iter().map(|r| r.r).collect();
        let labels: Vec<f64> = records.iter().map(CalibrationRecord::label).collect();
        let (_, g, _) = objective(&scores, &labels, m.a, m.b);
        assert!(g[0].hypot(g[1]) < 1e-8);
    }

    #[test]
    fn constant_scores_fall_back_to_base_rate() {
        let records: Vec<_> = (0..10).map(|i| record(3.0, i < 3)).collect();
        let m = fit_platt(&records).unwrap();
        assert!(m.degenerate);
        assert_eq!(m.a, 0.0);
        assert!((sigmoid(m.b) - 0.3).abs() < 1e-12);
    }

    #[test]
    fn single_class_is_an_error() {
        let records: Vec<_> = (0..5).map(|i| record(i as f64, true)).collect();
        assert!(matches!(fit_platt(&records), Err(Error::Fit(_))));
    }

    #[test]
    fn round_trip() {
        let m = PlattModel::new(1.5, -0.25);
        assert_eq!(PlattModel::from_bytes(&m.to_bytes()).unwrap(), m);
    }
}
