//! Synthetic listings with known click probabilities.
//!
//! Each listing draws a field value `z`, a standard normal context vector and
//! a variable number of items with standard normal features. An item's click
//! probability is `σ(w_item·x_item + w_ctx·x_ctx + offset[z] + ε)` with
//! `ε ~ N(0, noise²)`. The dataset context is the continuous context followed
//! by the one-hot code of `z`.
//!
//! Every listing is seeded from `(seed, listing id, attempt)` alone, so the
//! output does not depend on generation order. Listings without clicks are
//! redrawn.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::dataio::{Dataset, Item, Listing};
use crate::metrics::{oracle_f_ece_with, FieldPartition};
use crate::nn::sigmoid;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorConfig {
    pub listings: usize,
    pub min_items: usize,
    pub max_items: usize,
    pub item_weights: Vec<f64>,
    pub ctx_weights: Vec<f64>,
    /// Logit offset per field value; its length is the field cardinality.
    pub field_offsets: Vec<f64>,
    pub noise: f64,
    pub seed: u64,
    /// Redraws allowed per listing before giving up.
    pub max_attempts: u32,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            listings: 10_000,
            min_items: 6,
            max_items: 14,
            item_weights: vec![1.0, -0.8, 0.6, 0.5, -0.4, 0.3],
            ctx_weights: vec![0.8, -0.6, 0.5, 0.4],
            field_offsets: vec![-1.0, -1.0 / 3.0, 1.0 / 3.0, 1.0],
            noise: 0.1,
            seed: 0,
            max_attempts: 100,
        }
    }
}

impl GeneratorConfig {
    pub fn item_dim(&self) -> usize {
        self.item_weights.len()
    }

    pub fn fields(&self) -> usize {
        self.field_offsets.len()
    }

    /// Dimension of the dataset context: continuous features plus the one-hot
    /// field code.
    pub fn ctx_dim(&self) -> usize {
        self.ctx_weights.len() + self.fields()
    }

    pub fn validate(&self) -> Result<()> {
        if self.item_weights.is_empty() || self.ctx_weights.is_empty() {
            return Err(Error::config("item and context dimensions must be positive"));
        }
        if self.field_offsets.is_empty() {
            return Err(Error::config("at least one field value is required"));
        }
        if self.min_items == 0 || self.min_items > self.max_items {
            return Err(Error::config(format!(
                "invalid items per listing range {}..={}",
                self.min_items, self.max_items
            )));
        }
        let all = self
            .item_weights
            .iter()
            .chain(&self.ctx_weights)
            .chain(&self.field_offsets);
        if all.clone().any(|w| !w.is_finite()) {
            return Err(Error::config("generator weights and offsets must be finite"));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return Err(Error::config("noise scale must be finite and non-negative"));
        }
        if self.max_attempts == 0 {
            return Err(Error::config("max_attempts must be positive"));
        }
        Ok(())
    }
}

fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

fn listing_rng(seed: u64, id: u64, attempt: u32) -> ChaCha8Rng {
    let key = splitmix(splitmix(splitmix(seed) ^ id) ^ u64::from(attempt));
    ChaCha8Rng::seed_from_u64(key)
}

fn draw_listing(config: &GeneratorConfig, id: u64, rng: &mut ChaCha8Rng) -> Result<Listing> {
    let fields = config.fields();
    let z = rng.random_range(0..fields);
    let x_ctx: Vec<f64> = (0..config.ctx_weights.len())
        .map(|_| rng.sample(StandardNormal))
        .collect();
    let base = config.field_offsets[z]
        + x_ctx
            .iter()
            .zip(&config.ctx_weights)
            .map(|(x, w)| x * w)
            .sum::<f64>();
    let noise = Normal::new(0.0, config.noise).map_err(|e| Error::config(e.to_string()))?;
    let n = rng.random_range(config.min_items..=config.max_items);
    let mut items = Vec::with_capacity(n);
    for _ in 0..n {
        let features: Vec<f64> = (0..config.item_dim())
            .map(|_| rng.sample(StandardNormal))
            .collect();
        let u = base
            + features
                .iter()
                .zip(&config.item_weights)
                .map(|(x, w)| x * w)
                .sum::<f64>()
            + rng.sample(noise);
        let p = sigmoid(u);
        items.push(Item {
            features,
            click: rng.random::<f64>() < p,
            true_ctr: Some(p),
            score: None,
        });
    }
    let mut ctx = x_ctx;
    ctx.extend((0..fields).map(|k| if k == z { 1.0 } else { 0.0 }));
    Ok(Listing {
        id,
        field: z as u32,
        ctx,
        items,
    })
}

/// Generates `config.listings` listings, each with at least one click.
pub fn generate(config: &GeneratorConfig) -> Result<Dataset> {
    config.validate()?;
    let mut data = Dataset::new(config.ctx_dim(), config.item_dim(), "field");
    data.listings.reserve(config.listings);
    for id in 0..config.listings as u64 {
        let mut kept = None;
        for attempt in 0..config.max_attempts {
            let listing = draw_listing(config, id, &mut listing_rng(config.seed, id, attempt))?;
            if listing.clicks() > 0 {
                kept = Some(listing);
                break;
            }
        }
        let listing = kept.ok_or_else(|| {
            Error::Generation(format!(
                "listing {id} had no clicks after {} attempts",
                config.max_attempts
            ))
        })?;
        data.listings.push(listing);
    }
    Ok(data)
}

/// F-ECE of `preds` (one per item, in dataset order) against the stored
/// ground-truth probabilities.
pub fn oracle_f_ece(preds: &[f64], data: &Dataset, bins: usize) -> Result<f64> {
    if !data.has_ground_truth() {
        return Err(Error::input("dataset has no ground-truth probabilities"));
    }
    let (truth, fields): (Vec<f64>, Vec<u32>) = data
        .items()
        .map(|(l, i)| (i.true_ctr.expect("checked above"), l.field))
        .unzip();
    let partition = FieldPartition::from_fields(data.field_name.clone(), &fields);
    oracle_f_ece_with(preds, &truth, &partition, bins)
}
