//! Paired listing-level bootstrap.
//!
//! A resample draws test listings with replacement. Instead of materialising
//! the resampled rows, every metric is evaluated with per-row multiplicities
//! over orders computed once, which gives the same value as evaluating the
//! metric on the resampled dataset, up to the order of tied predictions.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::calibrators::CalibrationRecord;
use crate::metrics::{group_by_listing, ndcg};
use crate::nn::BCE_EPSILON;
use crate::{Error, Result};

/// Predictions of one method on one test set, prepared for weighted metric
/// evaluation.
pub struct WeightedEvaluator {
    bins: usize,
    preds: Vec<f64>,
    ranking: Vec<f64>,
    labels: Vec<bool>,
    /// Listing slot of every row.
    row_listing: Vec<usize>,
    /// Row indices per field, sorted by (prediction, index).
    field_orders: Vec<Vec<usize>>,
    /// All rows sorted by ranking score.
    global_order: Vec<usize>,
    listing_ndcg: Vec<Option<f64>>,
    listing_log_loss: Vec<f64>,
    listing_rows: Vec<u64>,
}

fn sorted_by_pred(preds: &[f64], mut idx: Vec<usize>) -> Vec<usize> {
    idx.sort_by(|&a, &b| preds[a].total_cmp(&preds[b]).then(a.cmp(&b)));
    idx
}

impl WeightedEvaluator {
    pub fn new(records: &[CalibrationRecord], preds: &[f64], bins: usize) -> Result<Self> {
        Self::with_ranking(records, preds, None, bins)
    }

    /// Like [`WeightedEvaluator::new`], with NDCG and AUC computed from
    /// separate ranking scores when given.
    pub fn with_ranking(
        records: &[CalibrationRecord],
        preds: &[f64],
        ranking: Option<&[f64]>,
        bins: usize,
    ) -> Result<Self> {
        let ranking = ranking.unwrap_or(preds);
        if records.len() != preds.len() || ranking.len() != preds.len() || records.is_empty() {
            return Err(Error::Dimension(format!(
                "{} predictions for {} records",
                preds.len(),
                records.len()
            )));
        }
        let labels: Vec<bool> = records.iter().map(|r| r.click).collect();
        let ids: Vec<u64> = records.iter().map(|r| r.listing).collect();
        let groups = group_by_listing(&ids);
        let mut row_listing = vec![0; records.len()];
        let mut listing_ndcg = Vec::with_capacity(groups.len());
        let mut listing_log_loss = Vec::with_capacity(groups.len());
        let mut listing_rows = Vec::with_capacity(groups.len());
        for (k, g) in groups.iter().enumerate() {
            let s: Vec<f64> = g.iter().map(|&i| ranking[i]).collect();
            let y: Vec<bool> = g.iter().map(|&i| labels[i]).collect();
            listing_ndcg.push(ndcg(&s, &y));
            let mut ll = 0.0;
            for &i in g {
                row_listing[i] = k;
                let p = preds[i].clamp(BCE_EPSILON, 1.0 - BCE_EPSILON);
                ll -= if labels[i] { p.ln() } else { (1.0 - p).ln() };
            }
            listing_log_loss.push(ll);
            listing_rows.push(g.len() as u64);
        }
        let mut fields: Vec<u32> = records.iter().map(|r| r.field).collect();
        fields.sort_unstable();
        fields.dedup();
        let field_orders = fields
            .iter()
            .map(|&z| {
                let idx = (0..records.len()).filter(|&i| records[i].field == z).collect();
                sorted_by_pred(preds, idx)
            })
            .collect();
        Ok(Self {
            bins,
            preds: preds.to_vec(),
            labels,
            row_listing,
            field_orders,
            global_order: sorted_by_pred(ranking, (0..records.len()).collect()),
            ranking: ranking.to_vec(),
            listing_ndcg,
            listing_log_loss,
            listing_rows,
        })
    }

    pub fn listings(&self) -> usize {
        self.listing_rows.len()
    }

    /// Metrics in table order (F-ECE, LogLoss, NDCG, AUC) for the dataset in
    /// which listing `k` appears `weights[k]` times.
    pub fn evaluate(&self, weights: &[u32]) -> [f64; 4] {
        [
            self.f_ece(weights),
            self.log_loss(weights),
            self.ndcg(weights),
            self.auc(weights),
        ]
    }

    pub fn evaluate_full(&self) -> [f64; 4] {
        self.evaluate(&vec![1; self.listings()])
    }

    fn row_weight(&self, weights: &[u32], i: usize) -> u64 {
        u64::from(weights[self.row_listing[i]])
    }

    fn f_ece(&self, weights: &[u32]) -> f64 {
        let mut weighted = 0.0;
        let mut total = 0u64;
        for order in &self.field_orders {
            let n: u64 = order.iter().map(|&i| self.row_weight(weights, i)).sum();
            if n == 0 {
                continue;
            }
            let bins = (self.bins as u64).min(n);
            let (base, extra) = (n / bins, n % bins);
            let mut bin = 0u64;
            let mut room = base + u64::from(extra > 0);
            let (mut gap, mut count) = (0.0, 0u64);
            let mut ece = 0.0;
            for &i in order {
                let mut w = self.row_weight(weights, i);
                let residual = f64::from(u8::from(self.labels[i])) - self.preds[i];
                while w > 0 {
                    let take = w.min(room);
                    gap += take as f64 * residual;
                    count += take;
                    room -= take;
                    w -= take;
                    if room == 0 {
                        ece += gap.abs() / count as f64;
                        gap = 0.0;
                        count = 0;
                        bin += 1;
                        room = base + u64::from(bin < extra);
                    }
                }
            }
            weighted += n as f64 * ece / bins as f64;
            total += n;
        }
        weighted / total as f64
    }

    fn log_loss(&self, weights: &[u32]) -> f64 {
        let (mut sum, mut rows) = (0.0, 0u64);
        for (k, &w) in weights.iter().enumerate() {
            sum += f64::from(w) * self.listing_log_loss[k];
            rows += u64::from(w) * self.listing_rows[k];
        }
        sum / rows as f64
    }

    fn ndcg(&self, weights: &[u32]) -> f64 {
        let (mut sum, mut count) = (0.0, 0u64);
        for (k, &w) in weights.iter().enumerate() {
            if let Some(v) = self.listing_ndcg[k] {
                sum += f64::from(w) * v;
                count += u64::from(w);
            }
        }
        if count == 0 {
            f64::NAN
        } else {
            sum / count as f64
        }
    }

    fn auc(&self, weights: &[u32]) -> f64 {
        let order = &self.global_order;
        let (mut neg_below, mut pairs) = (0.0, 0.0);
        let (mut pos_total, mut neg_total) = (0.0, 0.0);
        let mut start = 0;
        while start < order.len() {
            let mut end = start;
            let (mut pos, mut neg) = (0.0, 0.0);
            while end < order.len() && self.ranking[order[end]] == self.ranking[order[start]] {
                let i = order[end];
                let w = self.row_weight(weights, i) as f64;
                if self.labels[i] {
                    pos += w;
                } else {
                    neg += w;
                }
                end += 1;
            }
            pairs += pos * (neg_below + 0.5 * neg);
            neg_below += neg;
            pos_total += pos;
            neg_total += neg;
            start = end;
        }
        if pos_total == 0.0 || neg_total == 0.0 {
            f64::NAN
        } else {
            pairs / (pos_total * neg_total)
        }
    }
}

/// Two-sided paired bootstrap p-values, per table metric, for the mean over
/// seeds of `method − reference`. `pairs[s]` holds the two evaluators for
/// seed `s`, built on the same test listings.
pub fn paired_bootstrap(
    pairs: &[(&WeightedEvaluator, &WeightedEvaluator)],
    resamples: usize,
    seed: u64,
) -> Result<[f64; 4]> {
    if pairs.is_empty() || resamples == 0 {
        return Err(Error::config("bootstrap needs at least one seed and one resample"));
    }
    if pairs.iter().any(|(a, b)| a.listings() != b.listings()) {
        return Err(Error::Dimension("paired evaluators cover different listings".into()));
    }
    let mut rngs: Vec<ChaCha8Rng> = (0..pairs.len() as u64)
        .map(|s| ChaCha8Rng::seed_from_u64(seed ^ (s.wrapping_mul(0x9E37_79B9_7F4A_7C15))))
        .collect();
    let mut below = [0usize; 4];
    let mut above = [0usize; 4];
    let mut weights: Vec<u32> = Vec::new();
    for _ in 0..resamples {
        let mut delta = [0.0; 4];
        for ((method, reference), rng) in pairs.iter().zip(&mut rngs) {
            let n = method.listings();
            weights.clear();
            weights.resize(n, 0);
            for _ in 0..n {
                weights[rng.random_range(0..n)] += 1;
            }
            let a = method.evaluate(&weights);
            let b = reference.evaluate(&weights);
            for k in 0..4 {
                delta[k] += (a[k] - b[k]) / pairs.len() as f64;
            }
        }
        for k in 0..4 {
            below[k] += usize::from(delta[k] <= 0.0);
            above[k] += usize::from(delta[k] >= 0.0);
        }
    }
    let mut p = [0.0; 4];
    for k in 0..4 {
        p[k] = (2.0 * below[k].min(above[k]) as f64 / resamples as f64).min(1.0);
    }
    Ok(p)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::MetricsReport;

    fn fixture(seed: u64, listings: usize) -> (Vec<CalibrationRecord>, Vec<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut records = Vec::new();
        let mut preds = Vec::new();
        for l in 0..listings as u64 {
            let field = rng.random_range(0..3u32);
            let n = rng.random_range(2..7);
            for _ in 0..n {
                let p: f64 = 0.01 + 0.98 * rng.random::<f64>();
                records.push(CalibrationRecord {
                    r: p,
                    ctx: Vec::new(),
                    field,
                    click: rng.random::<f64>() < p,
                    listing: l,
                });
                preds.push(p);
            }
        }
        (records, preds)
    }

    fn expand(records: &[CalibrationRecord], preds: &[f64], weights: &[u32]) -> (Vec<CalibrationRecord>, Vec<f64>) {
        let groups = group_by_listing(&records.iter().map(|r| r.listing).collect::<Vec<_>>());
        let (mut rs, mut ps) = (Vec::new(), Vec::new());
        let mut next = 0u64;
        for (k, g) in groups.iter().enumerate() {
            for _ in 0..weights[k] {
                for &i in g {
                    rs.push(CalibrationRecord {
                        listing: next,
                        ..records[i].clone()
                    });
                    ps.push(preds[i]);
                }
                next += 1;
            }
        }
        (rs, ps)
    }

    #[test]
    fn unit_weights_match_direct_metrics() {
        let (records, preds) = fixture(1, 300);
        let eval = WeightedEvaluator::new(&records, &preds, 20).unwrap();
        let direct = MetricsReport::evaluate(&records, &preds, 20).unwrap().table_values();
        let weighted = eval.evaluate_full();
        for k in 0..4 {
            assert!((direct[k] - weighted[k]).abs() < 1e-12, "{k}: {direct:?} {weighted:?}");
        }
    }

    #[test]
    fn multiplicities_match_materialised_resample() {
        let (records, preds) = fixture(2, 120);
        let eval = WeightedEvaluator::new(&records, &preds, 10).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..20 {
            let mut w = vec![0u32; eval.listings()];
            let n = w.len();
            for _ in 0..n {
                w[rng.random_range(0..n)] += 1;
            }
            let (rs, ps) = expand(&records, &preds, &w);
            let direct = MetricsReport::evaluate(&rs, &ps, 10).unwrap().table_values();
            let weighted = eval.evaluate(&w);
            // F-ECE: a duplicated row may straddle a bin edge; values agree
            // because duplicates carry identical predictions and labels.
            for k in 0..4 {
                assert!((direct[k] - weighted[k]).abs() < 1e-9, "{k}: {direct:?} {weighted:?}");
            }
        }
    }

    #[test]
    fn identical_methods_are_not_significant() {
        let (records, preds) = fixture(3, 200);
        let a = WeightedEvaluator::new(&records, &preds, 20).unwrap();
        let b = WeightedEvaluator::new(&records, &preds, 20).unwrap();
        assert_eq!(paired_bootstrap(&[(&a, &b)], 50, 0).unwrap(), [1.0; 4]);
    }

    #[test]
    fn clearly_worse_method_is_significant() {
        let (records, preds) = fixture(4, 400);
        let shifted: Vec<f64> = preds.iter().map(|p| (p + 0.3).min(0.999)).collect();
        let good = WeightedEvaluator::new(&records, &preds, 20).unwrap();
        let bad = WeightedEvaluator::new(&records, &shifted, 20).unwrap();
        let p = paired_bootstrap(&[(&bad, &good)], 200, 1).unwrap();
        assert!(p[0] < 0.01 && p[1] < 0.01, "{p:?}");
    }
}
