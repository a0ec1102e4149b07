//! Calibration and ranking metrics.
//!
//! ECE uses `M` equal-frequency bins over the predictions: rows are ordered by
//! `(prediction, original index)` and bin sizes differ by at most one, the
//! extra rows going to the leading bins. F-ECE is the row-weighted mean of
//! per-field ECE values.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::ops::Range;

use crate::calibrators::CalibrationRecord;
use crate::nn::BCE_EPSILON;
use crate::{Error, Result};

/// Default number of ECE bins.
pub const DEFAULT_BINS: usize = 20;

/// Spearman threshold below which a listing counts as misordered.
pub const MISORDER_THRESHOLD: f64 = 0.99;

/// Row order by ascending prediction (ties by index) and the bin ranges into it.
pub(crate) fn quantile_bins(preds: &[f64], bins: usize) -> (Vec<usize>, Vec<Range<usize>>) {
    let n = preds.len();
    let bins = bins.min(n).max(1);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| preds[a].total_cmp(&preds[b]).then(a.cmp(&b)));
    let (base, extra) = (n / bins, n % bins);
    let mut ranges = Vec::with_capacity(bins);
    let mut start = 0;
    for m in 0..bins {
        let len = base + usize::from(m < extra);
        ranges.push(start..start + len);
        start += len;
    }
    (order, ranges)
}

fn effective_bins(rows: usize, bins: usize) -> Result<usize> {
    if bins == 0 {
        return Err(Error::config("bin count must be at least 1"));
    }
    if rows == 0 {
        return Err(Error::input("cannot compute ECE of an empty set"));
    }
    if rows < bins {
        log::warn!("only {rows} rows for {bins} bins; using {rows} bins");
        return Ok(rows);
    }
    Ok(bins)
}

fn check_lengths(a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::Dimension(format!("{a} predictions for {b} labels")));
    }
    Ok(())
}

/// Mean over bins of `|Σ (target − pred)| / |bin|`.
fn binned_gap(preds: &[f64], target: impl Fn(usize) -> f64, bins: usize) -> f64 {
    let (order, ranges) = quantile_bins(preds, bins);
    let m = ranges.len() as f64;
    ranges
        .into_iter()
        .map(|range| {
            let len = range.len() as f64;
            let gap: f64 = order[range].iter().map(|&i| target(i) - preds[i]).sum();
            gap.abs() / len
        })
        .sum::<f64>()
        / m
}

/// Expected calibration error at `bins` equal-frequency bins.
pub fn ece_at_m(preds: &[f64], labels: &[bool], bins: usize) -> Result<f64> {
    check_lengths(preds.len(), labels.len())?;
    let bins = effective_bins(preds.len(), bins)?;
    Ok(binned_gap(preds, |i| f64::from(u8::from(labels[i])), bins))
}

/// Rows grouped by the value of one categorical field.
#[derive(Debug, Clone, PartialEq)]
pub struct FieldPartition {
    pub name: String,
    pub blocks: BTreeMap<u32, Vec<usize>>,
}

impl FieldPartition {
    pub fn from_fields(name: impl Into<String>, fields: &[u32]) -> Self {
        let mut blocks: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
        for (i, &z) in fields.iter().enumerate() {
            blocks.entry(z).or_default().push(i);
        }
        Self {
            name: name.into(),
            blocks,
        }
    }

    pub fn from_records(name: impl Into<String>, records: &[CalibrationRecord]) -> Self {
        let fields: Vec<u32> = records.iter().map(|r| r.field).collect();
        Self::from_fields(name, &fields)
    }

    fn check_covers(&self, rows: usize) -> Result<()> {
        let mut seen = vec![false; rows];
        for idx in self.blocks.values().flatten() {
            match seen.get_mut(*idx) {
                Some(s) if !*s => *s = true,
                Some(_) => return Err(Error::input(format!("row {idx} appears in two field blocks"))),
                None => return Err(Error::input(format!("row {idx} is out of range"))),
            }
        }
        if let Some(i) = seen.iter().position(|s| !s) {
            return Err(Error::input(format!("row {i} is not covered by the partition")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FieldEce {
    pub f_ece: f64,
    pub per_field: BTreeMap<u32, f64>,
}

fn field_weighted(
    partition: &FieldPartition,
    rows: usize,
    mut block_ece: impl FnMut(&[usize]) -> Result<f64>,
) -> Result<FieldEce> {
    partition.check_covers(rows)?;
    let mut per_field = BTreeMap::new();
    let mut weighted = 0.0;
    let mut total = 0usize;
    for (&z, idx) in &partition.blocks {
        if idx.is_empty() {
            log::warn!("field value {z} has no rows; excluded from F-ECE");
            continue;
        }
        let e = block_ece(idx)?;
        weighted += idx.len() as f64 * e;
        total += idx.len();
        per_field.insert(z, e);
    }
    if total == 0 {
        return Err(Error::input("partition has no rows"));
    }
    Ok(FieldEce {
        f_ece: weighted / total as f64,
        per_field,
    })
}

/// One equal-frequency bin of a reliability curve.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReliabilityBin {
    pub count: usize,
    pub mean_pred: f64,
    pub rate: f64,
}

/// The bins behind [`ece_at_m`]; the mean of `|rate − mean_pred|` over the
/// bins is the ECE.
pub fn reliability_curve(preds: &[f64], labels: &[bool], bins: usize) -> Result<Vec<ReliabilityBin>> {
    check_lengths(preds.len(), labels.len())?;
    let bins = effective_bins(preds.len(), bins)?;
    let (order, ranges) = quantile_bins(preds, bins);
    Ok(ranges
        .into_iter()
        .map(|range| {
            let count = range.len();
            let rows = &order[range];
            ReliabilityBin {
                count,
                mean_pred: rows.iter().map(|&i| preds[i]).sum::<f64>() / count as f64,
                rate: rows.iter().filter(|&&i| labels[i]).count() as f64 / count as f64,
            }
        })
        .collect())
}

/// Field-level ECE: per-field ECE weighted by field row counts.
pub fn f_ece(
    preds: &[f64],
    labels: &[bool],
    partition: &FieldPartition,
    bins: usize,
) -> Result<FieldEce> {
    check_lengths(preds.len(), labels.len())?;
    field_weighted(partition, preds.len(), |idx| {
        let p: Vec<f64> = idx.iter().map(|&i| preds[i]).collect();
        let y: Vec<bool> = idx.iter().map(|&i| labels[i]).collect();
        ece_at_m(&p, &y, bins)
    })
}

/// F-ECE measured against ground-truth probabilities instead of clicks.
pub fn oracle_f_ece_with(
    preds: &[f64],
    truth: &[f64],
    partition: &FieldPartition,
    bins: usize,
) -> Result<f64> {
    check_lengths(preds.len(), truth.len())?;
    Ok(field_weighted(partition, preds.len(), |idx| {
        let p: Vec<f64> = idx.iter().map(|&i| preds[i]).collect();
        let t: Vec<f64> = idx.iter().map(|&i| truth[i]).collect();
        let bins = effective_bins(p.len(), bins)?;
        Ok(binned_gap(&p, |i| t[i], bins))
    })?
    .f_ece)
}

/// Mean BCE with ε-clipped predictions.
pub fn log_loss(preds: &[f64], labels: &[bool]) -> Result<f64> {
    check_lengths(preds.len(), labels.len())?;
    if preds.is_empty() {
        return Err(Error::input("log loss of an empty set"));
    }
    let total: f64 = preds
        .iter()
        .zip(labels)
        .map(|(&p, &y)| {
            let p = p.clamp(BCE_EPSILON, 1.0 - BCE_EPSILON);
            if y {
                -p.ln()
            } else {
                -(1.0 - p).ln()
            }
        })
        .sum();
    Ok(total / preds.len() as f64)
}

/// 1-based ranks with ties replaced by their average rank.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && values[order[end]] == values[order[start]] {
            end += 1;
        }
        // positions start..end hold ranks start+1..=end
        let avg = (start + 1 + end) as f64 / 2.0;
        for &i in &order[start..end] {
            ranks[i] = avg;
        }
        start = end;
    }
    ranks
}

/// Mann–Whitney AUC with ties counted one half. `None` when a class is absent.
pub fn auc(scores: &[f64], labels: &[bool]) -> Option<f64> {
    if scores.len() != labels.len() {
        return None;
    }
    let pos = labels.iter().filter(|&&l| l).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return None;
    }
    let ranks = average_ranks(scores);
    let rank_sum: f64 = ranks.iter().zip(labels).filter(|(_, &l)| l).map(|(r, _)| r).sum();
    let p = pos as f64;
    Some((rank_sum - p * (p + 1.0) / 2.0) / (p * neg as f64))
}

/// Full-list NDCG with binary gains; descending score order, ties by index.
/// `None` when the listing has no positive label.
pub fn ndcg(scores: &[f64], labels: &[bool]) -> Option<f64> {
    if scores.len() != labels.len() || scores.is_empty() {
        return None;
    }
    let positives = labels.iter().filter(|&&l| l).count();
    if positives == 0 {
        return None;
    }
    let discount = |rank0: usize| 1.0 / ((rank0 + 2) as f64).log2();
    let ideal: f64 = (0..positives).map(discount).sum();
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let dcg: f64 = order
        .iter()
        .enumerate()
        .filter(|(_, &i)| labels[i])
        .map(|(rank, _)| discount(rank))
        .sum();
    Some(dcg / ideal)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NdcgSummary {
    pub mean: f64,
    pub evaluated: usize,
    /// Listings without positives, left out of the mean.
    pub excluded: usize,
}

/// Row indices grouped by listing id, in order of first appearance.
pub fn group_by_listing(listing_ids: &[u64]) -> Vec<Vec<usize>> {
    let mut slot: std::collections::HashMap<u64, usize> = std::collections::HashMap::new();
    let mut groups: Vec<Vec<usize>> = Vec::new();
    for (i, id) in listing_ids.iter().enumerate() {
        let k = *slot.entry(*id).or_insert_with(|| {
            groups.push(Vec::new());
            groups.len() - 1
        });
        groups[k].push(i);
    }
    groups
}

/// Mean NDCG over listings given row-aligned scores, labels and listing ids.
pub fn mean_ndcg(scores: &[f64], labels: &[bool], listing_ids: &[u64]) -> Result<NdcgSummary> {
    check_lengths(scores.len(), labels.len())?;
    check_lengths(scores.len(), listing_ids.len())?;
    let mut total = 0.0;
    let (mut evaluated, mut excluded) = (0, 0);
    for group in group_by_listing(listing_ids) {
        let s: Vec<f64> = group.iter().map(|&i| scores[i]).collect();
        let y: Vec<bool> = group.iter().map(|&i| labels[i]).collect();
        match ndcg(&s, &y) {
            Some(v) => {
                total += v;
                evaluated += 1;
            }
            None => excluded += 1,
        }
    }
    if evaluated == 0 {
        return Err(Error::input("no listing has a positive label"));
    }
    Ok(NdcgSummary {
        mean: total / evaluated as f64,
        evaluated,
        excluded,
    })
}

/// Spearman rank correlation with average ranks for ties. `None` when either
/// side is constant.
pub fn spearman(a: &[f64], b: &[f64]) -> Option<f64> {
    if a.len() != b.len() || a.len() < 2 {
        return None;
    }
    let ra = average_ranks(a);
    let rb = average_ranks(b);
    let n = a.len() as f64;
    let mean = (n + 1.0) / 2.0;
    let (mut cov, mut va, mut vb) = (0.0, 0.0, 0.0);
    for (x, y) in ra.iter().zip(&rb) {
        let (dx, dy) = (x - mean, y - mean);
        cov += dx * dy;
        va += dx * dx;
        vb += dy * dy;
    }
    if va == 0.0 || vb == 0.0 {
        return None;
    }
    Some(cov / (va * vb).sqrt())
}

/// Spearman used for order comparison: two constant sides agree perfectly,
/// a single constant side counts as uncorrelated.
fn order_agreement(raw: &[f64], calibrated: &[f64]) -> f64 {
    match spearman(raw, calibrated) {
        Some(rho) => rho,
        None => {
            let constant = |v: &[f64]| v.iter().all(|x| *x == v[0]);
            if constant(raw) && constant(calibrated) {
                1.0
            } else {
                0.0
            }
        }
    }
}

/// Fraction of listings (with at least two items) whose Spearman correlation
/// between raw and calibrated scores falls below `threshold`.
pub fn misordered_fraction(
    raw: &[f64],
    calibrated: &[f64],
    listing_ids: &[u64],
    threshold: f64,
) -> Result<f64> {
    check_lengths(raw.len(), calibrated.len())?;
    check_lengths(raw.len(), listing_ids.len())?;
    let mut eligible = 0usize;
    let mut misordered = 0usize;
    for group in group_by_listing(listing_ids) {
        if group.len() < 2 {
            continue;
        }
        eligible += 1;
        let r: Vec<f64> = group.iter().map(|&i| raw[i]).collect();
        let c: Vec<f64> = group.iter().map(|&i| calibrated[i]).collect();
        if order_agreement(&r, &c) < threshold {
            misordered += 1;
        }
    }
    if eligible == 0 {
        return Err(Error::input("no listing has two or more items"));
    }
    Ok(misordered as f64 / eligible as f64)
}

/// One row of a benchmark table.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub f_ece: f64,
    pub per_field: BTreeMap<u32, f64>,
    pub log_loss: f64,
    pub auc: f64,
    pub ndcg: f64,
    pub misordered_fraction: f64,
    pub bins: usize,
}

impl MetricsReport {
    /// Evaluates calibrated predictions against the records they were made for.
    pub fn evaluate(records: &[CalibrationRecord], preds: &[f64], bins: usize) -> Result<Self> {
        check_lengths(preds.len(), records.len())?;
        let labels: Vec<bool> = records.iter().map(|r| r.click).collect();
        let raw: Vec<f64> = records.iter().map(|r| r.r).collect();
        let ids: Vec<u64> = records.iter().map(|r| r.listing).collect();
        let partition = FieldPartition::from_records("field", records);
        let fe = f_ece(preds, &labels, &partition, bins)?;
        let auc = auc(preds, &labels)
            .ok_or_else(|| Error::input("AUC is undefined on single-class data"))?;
        Ok(Self {
            f_ece: fe.f_ece,
            per_field: fe.per_field,
            log_loss: log_loss(preds, &labels)?,
            auc,
            ndcg: mean_ndcg(preds, &labels, &ids)?.mean,
            misordered_fraction: misordered_fraction(&raw, preds, &ids, MISORDER_THRESHOLD)?,
            bins,
        })
    }

    /// `key=value` record on one line, fields in a fixed order.
    pub fn to_record_line(&self, label: &str) -> String {
        let mut s = format!(
            "method={} f_ece={} log_loss={} ndcg={} auc={} misordered={} bins={}",
            label.replace(' ', "_"),
            self.f_ece,
            self.log_loss,
            self.ndcg,
            self.auc,
            self.misordered_fraction,
            self.bins
        );
        for (z, e) in &self.per_field {
            let _ = write!(s, " ece[{z}]={e}");
        }
        s
    }

    /// Values in table column order: F-ECE, LogLoss, NDCG, AUC.
    pub fn table_values(&self) -> [f64; 4] {
        [self.f_ece, self.log_loss, self.ndcg, self.auc]
    }
}
