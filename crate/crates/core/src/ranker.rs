//! Backbone learning-to-rank model.
//!
//! The ranker is a small fully-connected network over `concat(x_ctx, x_item)`
//! with an unbounded scalar output. It is trained one listing per gradient
//! step, either with a LambdaRank objective (pairwise logistic loss weighted
//! by the NDCG change of swapping each pair) or with a regression-compatible
//! blend of pointwise BCE and a listwise softmax cross-entropy. Pairwise
//! training leaves scores free of any per-listing offset, so they are
//! uncalibrated by construction.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::container::{Decoder, Encoder, ModelKind, Persist};
use crate::dataio::{Dataset, Listing};
use crate::nn::{
    sigmoid, Activation, BackwardScratch, ForwardTrace, MlpGrads, MlpParams, OptimizerState,
};
use crate::{Error, Result};

/// Mixing weight of the regression-compatible loss. `alpha = 0` is pure
/// pointwise BCE, `alpha = 1` is pure listwise.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RcrConfig {
    alpha: f64,
}

impl RcrConfig {
    pub fn new(alpha: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&alpha) {
            return Err(Error::config(format!("rcr alpha must lie in [0, 1], got {alpha}")));
        }
        Ok(Self { alpha })
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum RankingLoss {
    Lambda,
    Rcr { alpha: f64 },
}

/// Loss value and its gradient with respect to each item score.
#[derive(Debug, Clone, PartialEq)]
pub struct ListLoss {
    pub loss: f64,
    pub score_grads: Vec<f64>,
}

#[inline]
fn softplus(x: f64) -> f64 {
    // ln(1 + e^x) without overflow.
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn has_mixed_labels(labels: &[bool]) -> bool {
    labels.iter().any(|&l| l) && labels.iter().any(|&l| !l)
}

/// Positions (0-based) of each item when sorted by descending score, ties
/// broken by original index.
pub(crate) fn rank_positions(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut pos = vec![0; scores.len()];
    for (rank, &i) in order.iter().enumerate() {
        pos[i] = rank;
    }
    pos
}

#[inline]
fn discount(rank0: usize) -> f64 {
    1.0 / ((rank0 + 2) as f64).log2()
}

/// LambdaRank loss over one listing. Returns `None` when labels are all equal,
/// which carries no pairwise signal.
pub fn lambda_pair_loss(scores: &[f64], labels: &[bool]) -> Result<Option<ListLoss>> {
    if scores.len() != labels.len() {
        return Err(Error::Dimension(format!(
            "{} scores for {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if !has_mixed_labels(labels) {
        return Ok(None);
    }
    let positives = labels.iter().filter(|&&l| l).count();
    let ideal: f64 = (0..positives).map(discount).sum();
    let ranks = rank_positions(scores);
    let mut loss = 0.0;
    let mut grads = vec![0.0; scores.len()];
    for i in (0..scores.len()).filter(|&i| labels[i]) {
        for j in (0..scores.len()).filter(|&j| !labels[j]) {
            let delta_ndcg = (discount(ranks[i]) - discount(ranks[j])).abs() / ideal;
            let margin = scores[i] - scores[j];
            loss += delta_ndcg * softplus(-margin);
            let g = delta_ndcg * sigmoid(-margin);
            grads[i] -= g;
            grads[j] += g;
        }
    }
    Ok(Some(ListLoss {
        loss,
        score_grads: grads,
    }))
}

/// Mean pointwise BCE of `sigmoid(score)` in logit form, with its gradient.
pub fn pointwise_term(scores: &[f64], labels: &[bool]) -> (f64, Vec<f64>) {
    let n = scores.len() as f64;
    let mut loss = 0.0;
    let grads = scores
        .iter()
        .zip(labels)
        .map(|(&s, &l)| {
            let y = if l { 1.0 } else { 0.0 };
            loss += softplus(s) - y * s;
            (sigmoid(s) - y) / n
        })
        .collect();
    (loss / n, grads)
}

/// Softmax cross-entropy against click-normalised labels, with its gradient.
/// Requires at least one positive.
pub fn listwise_term(scores: &[f64], labels: &[bool]) -> (f64, Vec<f64>) {
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let log_norm = max + scores.iter().map(|s| (s - max).exp()).sum::<f64>().ln();
    let clicks = labels.iter().filter(|&&l| l).count() as f64;
    let mut loss = 0.0;
    let grads = scores
        .iter()
        .zip(labels)
        .map(|(&s, &l)| {
            let target = if l { 1.0 / clicks } else { 0.0 };
            let log_p = s - log_norm;
            loss -= target * log_p;
            log_p.exp() - target
        })
        .collect();
    (loss, grads)
}

/// Regression-compatible ranking loss:
/// `(1 − α) · mean BCE + α · listwise softmax cross-entropy`.
pub fn rcr_loss(scores: &[f64], labels: &[bool], config: RcrConfig) -> Result<Option<ListLoss>> {
    if scores.len() != labels.len() {
        return Err(Error::Dimension(format!(
            "{} scores for {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if !has_mixed_labels(labels) {
        return Ok(None);
    }
    let a = config.alpha;
    let (pw, pw_grad) = pointwise_term(scores, labels);
    let (lw, lw_grad) = listwise_term(scores, labels);
    let score_grads = pw_grad
        .iter()
        .zip(&lw_grad)
        .map(|(p, l)| (1.0 - a) * p + a * l)
        .collect();
    Ok(Some(ListLoss {
        loss: (1.0 - a) * pw + a * lw,
        score_grads,
    }))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RankerConfig {
    pub loss: RankingLoss,
    pub hidden: Vec<usize>,
    pub epochs: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for RankerConfig {
    fn default() -> Self {
        Self {
            loss: RankingLoss::Lambda,
            hidden: vec![32, 16],
            epochs: 4,
            lr: 1e-3,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RankerModel {
    net: MlpParams,
    ctx_dim: usize,
    item_dim: usize,
    final_loss: f64,
}

impl RankerModel {
    pub fn new(net: MlpParams, ctx_dim: usize, item_dim: usize) -> Result<Self> {
        if net.in_dim() != ctx_dim + item_dim || net.out_dim() != 1 {
            return Err(Error::Dimension(format!(
                "ranker network is {}→{}, layout needs {}→1",
                net.in_dim(),
                net.out_dim(),
                ctx_dim + item_dim
            )));
        }
        Ok(Self {
            net,
            ctx_dim,
            item_dim,
            final_loss: f64::NAN,
        })
    }

    pub fn net(&self) -> &MlpParams {
        &self.net
    }

    pub fn ctx_dim(&self) -> usize {
        self.ctx_dim
    }

    pub fn item_dim(&self) -> usize {
        self.item_dim
    }

    /// Mean listing loss over the last training epoch.
    pub fn final_loss(&self) -> f64 {
        self.final_loss
    }

    fn check_listing(&self, listing: &Listing) -> Result<()> {
        if listing.ctx.len() != self.ctx_dim {
            return Err(Error::Dimension(format!(
                "listing {} has ctx dim {}, ranker expects {}",
                listing.id,
                listing.ctx.len(),
                self.ctx_dim
            )));
        }
        if let Some(item) = listing.items.iter().find(|i| i.features.len() != self.item_dim) {
            return Err(Error::Dimension(format!(
                "listing {} has item dim {}, ranker expects {}",
                listing.id,
                item.features.len(),
                self.item_dim
            )));
        }
        Ok(())
    }

    /// Scores every item of a listing independently.
    pub fn score_listing(&self, listing: &Listing) -> Result<Vec<f64>> {
        self.check_listing(listing)?;
        let mut input = Vec::with_capacity(self.ctx_dim + self.item_dim);
        let mut trace = ForwardTrace::default();
        listing
            .items
            .iter()
            .map(|item| {
                input.clear();
                input.extend_from_slice(&listing.ctx);
                input.extend_from_slice(&item.features);
                self.net.forward_into(&input, &mut trace)?;
                Ok(trace.output()[0])
            })
            .collect()
    }

    /// Last hidden activation for `concat(ctx, 0)`: a context-only embedding
    /// read out of the ranker.
    pub fn context_embedding(&self, ctx: &[f64]) -> Result<Vec<f64>> {
        if ctx.len() != self.ctx_dim {
            return Err(Error::Dimension(format!(
                "ctx dim {} != {}",
                ctx.len(),
                self.ctx_dim
            )));
        }
        let mut input = ctx.to_vec();
        input.resize(self.ctx_dim + self.item_dim, 0.0);
        let trace = self.net.forward(&input)?;
        let acts = trace.activations();
        Ok(if acts.len() >= 2 {
            acts[acts.len() - 2].clone()
        } else {
            input
        })
    }

    pub fn embedding_dim(&self) -> usize {
        let layers = self.net.layers();
        if layers.len() >= 2 {
            layers[layers.len() - 2].out_dim()
        } else {
            self.ctx_dim + self.item_dim
        }
    }
}

/// Trains a ranker on listings with mixed labels; other listings are skipped.
pub fn train_ranker(data: &Dataset, config: &RankerConfig) -> Result<RankerModel> {
    if data.listings.is_empty() {
        return Err(Error::input("cannot train a ranker on an empty dataset"));
    }
    if config.epochs == 0 {
        return Err(Error::config("ranker epochs must be positive"));
    }
    let rcr = match config.loss {
        RankingLoss::Lambda => None,
        RankingLoss::Rcr { alpha } => Some(RcrConfig::new(alpha)?),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut spec: Vec<(usize, Activation)> =
        config.hidden.iter().map(|&h| (h, Activation::Relu)).collect();
    spec.push((1, Activation::Identity));
    let net = MlpParams::init(data.ctx_dim + data.item_dim, &spec, &mut rng)?;
    let mut model = RankerModel::new(net, data.ctx_dim, data.item_dim)?;
    for listing in &data.listings {
        model.check_listing(listing)?;
    }
    let mut opt = OptimizerState::adam(&model.net, config.lr)?;
    let mut grads = MlpGrads::zeros_like(&model.net);
    let mut scratch = BackwardScratch::default();
    let mut traces: Vec<ForwardTrace> = Vec::new();
    let mut scores = Vec::new();
    let mut labels = Vec::new();
    let mut input = Vec::new();
    let mut order: Vec<usize> = (0..data.listings.len()).collect();

    let mut last_epoch_loss = f64::NAN;
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut used = 0usize;
        for &li in &order {
            let listing = &data.listings[li];
            let n = listing.items.len();
            if traces.len() < n {
                traces.resize_with(n, ForwardTrace::default);
            }
            scores.clear();
            labels.clear();
            for (item, trace) in listing.items.iter().zip(traces.iter_mut()) {
                input.clear();
                input.extend_from_slice(&listing.ctx);
                input.extend_from_slice(&item.features);
                model.net.forward_into(&input, trace)?;
                scores.push(trace.output()[0]);
                labels.push(item.click);
            }
            let outcome = match rcr {
                None => lambda_pair_loss(&scores, &labels)?,
                Some(cfg) => rcr_loss(&scores, &labels, cfg)?,
            };
            let Some(ListLoss { loss, score_grads }) = outcome else {
                continue;
            };
            if !loss.is_finite() {
                return Err(Error::Training(format!(
                    "non-finite ranker loss in epoch {epoch} on listing {}",
                    listing.id
                )));
            }
            grads.clear();
            for (trace, &g) in traces.iter().zip(&score_grads) {
                if g != 0.0 {
                    model
                        .net
                        .backward_accumulate(trace, &[g], 1.0, &mut grads, &mut scratch)?;
                }
            }
            opt.step(&mut model.net, &grads)?;
            total += loss;
            used += 1;
        }
        if used == 0 {
            return Err(Error::input("no listing has both clicked and unclicked items"));
        }
        last_epoch_loss = total / used as f64;
        log::debug!("ranker epoch {epoch}: mean loss {last_epoch_loss:.6} over {used} listings");
    }
    model.final_loss = last_epoch_loss;
    Ok(model)
}

impl Persist for RankerModel {
    const KIND: ModelKind = ModelKind::Ranker;

    fn encode_payload(&self, enc: &mut Encoder) {
        enc.len_prefix(self.ctx_dim);
        enc.len_prefix(self.item_dim);
        enc.f64(self.final_loss);
        enc.mlp(&self.net);
    }

    fn decode_payload(dec: &mut Decoder<'_>) -> Result<Self> {
        let ctx_dim = dec.len_prefix()?;
        let item_dim = dec.len_prefix()?;
        let final_loss = dec.f64()?;
        let mut model = RankerModel::new(dec.mlp()?, ctx_dim, item_dim)?;
        model.final_loss = final_loss;
        Ok(model)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::Item;
    use crate::metrics::ndcg;
    use std::f64::consts::LN_2;

    #[test]
    fn well_separated_pair_has_negligible_loss() {
        let out = lambda_pair_loss(&[5.0, -5.0], &[true, false]).unwrap().unwrap();
        let delta = 1.0 - 1.0 / 3f64.log2();
        let expected = delta * (-10f64).exp().ln_1p();
        assert!((out.loss - expected).abs() < 1e-12 * expected);
        assert!(out.loss < 4.54e-5 * delta * 1.001);
    }

    #[test]
    fn tied_pair_costs_ln2_per_pair() {
        let out = lambda_pair_loss(&[0.0, 0.0], &[true, false]).unwrap().unwrap();
        let delta = 1.0 - 1.0 / 3f64.log2();
        assert!((out.loss - delta * LN_2).abs() < 1e-15);
        assert!(out.score_grads[0] < 0.0 && out.score_grads[1] > 0.0);
    }

    #[test]
    fn uniform_labels_are_skipped() {
        assert!(lambda_pair_loss(&[1.0, 2.0], &[true, true]).unwrap().is_none());
        assert!(lambda_pair_loss(&[1.0, 2.0], &[false, false]).unwrap().is_none());
        let cfg = RcrConfig::new(0.5).unwrap();
        assert!(rcr_loss(&[1.0], &[true], cfg).unwrap().is_none());
    }

    #[test]
    fn lambda_gradient_matches_finite_differences() {
        let labels = [true, false, false];
        let scores = [0.3, -0.4, 1.1];
        let g = lambda_pair_loss(&scores, &labels).unwrap().unwrap().score_grads;
        let h = 1e-6;
        for i in 0..3 {
            let mut up = scores;
            let mut down = scores;
            up[i] += h;
            down[i] -= h;
            let fu = lambda_pair_loss(&up, &labels).unwrap().unwrap().loss;
            let fd = lambda_pair_loss(&down, &labels).unwrap().unwrap().loss;
            let numeric = (fu - fd) / (2.0 * h);
            assert!((numeric - g[i]).abs() < 1e-5, "item {i}: {numeric} vs {}", g[i]);
        }
    }

    #[test]
    fn rcr_endpoints_collapse_to_single_terms() {
        let scores = [0.4, -1.2, 2.0, 0.0];
        let labels = [true, false, true, false];
        let (pw, _) = pointwise_term(&scores, &labels);
        let (lw, _) = listwise_term(&scores, &labels);
        let zero = rcr_loss(&scores, &labels, RcrConfig::new(0.0).unwrap()).unwrap().unwrap();
        let one = rcr_loss(&scores, &labels, RcrConfig::new(1.0).unwrap()).unwrap().unwrap();
        assert_eq!(zero.loss, pw);
        assert_eq!(one.loss, lw);
        // Independent check of the pointwise term through the clipped BCE.
        let direct: f64 = scores
            .iter()
            .zip(&labels)
            .map(|(&s, &l)| crate::nn::bce_loss(sigmoid(s), if l { 1.0 } else { 0.0 }).unwrap().0)
            .sum::<f64>()
            / 4.0;
        assert!((pw - direct).abs() < 1e-12);
    }

    #[test]
    fn rcr_half_on_tie() {
        let out = rcr_loss(&[0.0, 0.0], &[true, false], RcrConfig::new(0.5).unwrap())
            .unwrap()
            .unwrap();
        assert!((out.loss - LN_2).abs() < 1e-15);
    }

    #[test]
    fn rcr_gradient_matches_finite_differences() {
        let cfg = RcrConfig::new(0.3).unwrap();
        let labels = [false, true, true, false];
        let scores = [0.2, -0.7, 1.5, 0.9];
        let g = rcr_loss(&scores, &labels, cfg).unwrap().unwrap().score_grads;
        let h = 1e-6;
        for i in 0..scores.len() {
            let mut up = scores;
            let mut down = scores;
            up[i] += h;
            down[i] -= h;
            let numeric = (rcr_loss(&up, &labels, cfg).unwrap().unwrap().loss
                - rcr_loss(&down, &labels, cfg).unwrap().unwrap().loss)
                / (2.0 * h);
            assert!((numeric - g[i]).abs() < 1e-7);
        }
    }

    #[test]
    fn rcr_rejects_alpha_outside_unit_interval() {
        assert!(RcrConfig::new(-0.1).is_err());
        assert!(RcrConfig::new(1.5).is_err());
    }

    #[test]
    fn lambda_loss_is_shift_invariant() {
        let labels = [true, false, true, false, false];
        let scores = [0.1, 0.5, -0.3, 2.0, -1.0];
        let base = lambda_pair_loss(&scores, &labels).unwrap().unwrap();
        for shift in [-100.0, -3.3, 0.7, 42.0] {
            let moved: Vec<f64> = scores.iter().map(|s| s + shift).collect();
            let out = lambda_pair_loss(&moved, &labels).unwrap().unwrap();
            assert!((out.loss - base.loss).abs() < 1e-9);
        }
    }

    fn tiny_dataset() -> Dataset {
        let item = |f: f64, click: bool| Item {
            features: vec![f],
            click,
            true_ctr: None,
            score: None,
        };
        Dataset {
            ctx_dim: 1,
            item_dim: 1,
            field_name: "field".into(),
            listings: vec![Listing {
                id: 0,
                field: 0,
                ctx: vec![0.5],
                items: vec![item(-1.0, true), item(1.0, false)],
            }],
        }
    }

    #[test]
    fn memorises_a_single_listing() {
        let data = tiny_dataset();
        let cfg = RankerConfig {
            epochs: 200,
            lr: 1e-2,
            ..RankerConfig::default()
        };
        let model = train_ranker(&data, &cfg).unwrap();
        let scores = model.score_listing(&data.listings[0]).unwrap();
        let labels: Vec<bool> = data.listings[0].items.iter().map(|i| i.click).collect();
        assert_eq!(ndcg(&scores, &labels), Some(1.0));
        assert!(model.final_loss().is_finite());
    }

    #[test]
    fn training_is_reproducible() {
        let data = tiny_dataset();
        let cfg = RankerConfig {
            epochs: 5,
            seed: 9,
            ..RankerConfig::default()
        };
        let a = train_ranker(&data, &cfg).unwrap();
        let b = train_ranker(&data, &cfg).unwrap();
        assert_eq!(a.to_bytes(), b.to_bytes());
    }

    #[test]
    fn empty_dataset_is_rejected() {
        let mut data = tiny_dataset();
        data.listings.clear();
        assert!(matches!(
            train_ranker(&data, &RankerConfig::default()),
            Err(Error::Input(_))
        ));
    }

    #[test]
    fn scoring_is_item_local() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let net = MlpParams::init(
            3,
            &[(4, Activation::Relu), (1, Activation::Identity)],
            &mut rng,
        )
        .unwrap();
        let model = RankerModel::new(net, 1, 2).unwrap();
        let item = |a: f64, b: f64| Item {
            features: vec![a, b],
            click: false,
            true_ctr: None,
            score: None,
        };
        let listing = Listing {
            id: 3,
            field: 0,
            ctx: vec![0.2],
            items: vec![item(1.0, 2.0), item(-1.0, 0.5), item(1.0, 2.0)],
        };
        let scores = model.score_listing(&listing).unwrap();
        assert_eq!(scores[0], scores[2]);
        let mut permuted = listing.clone();
        permuted.items.reverse();
        let mut rev = model.score_listing(&permuted).unwrap();
        rev.reverse();
        assert_eq!(rev, scores);
        for (item, &s) in listing.items.iter().zip(&scores) {
            let single = model
                .net()
                .predict(&[0.2, item.features[0], item.features[1]])
                .unwrap()[0];
            assert_eq!(single, s);
        }
        let mut bad = listing;
        bad.ctx.push(1.0);
        assert!(model.score_listing(&bad).is_err());
    }
}
