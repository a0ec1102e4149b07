//! Listing datasets: in-memory model, text file format, splitting, and
//! assembly of calibration records from ranker scores.
//!
//! The file format is line-oriented and tab-separated:
//!
//! ```text
//! #mlplatt-dataset version=1 ctx_dim=2 item_dim=1 field=device ground_truth=1 scored=0
//! #columns listing_id field ctx_0 ctx_1 item_0 click true_ctr
//! 0	1	0.5	-1	0.25	1	0.62
//! ```
//!
//! Rows of one listing are contiguous and repeat the listing's field and
//! context values. Floats are written in Rust's shortest round-trip decimal
//! form, so a read followed by a write reproduces the original bytes.

mod aliexpress;

pub use aliexpress::{load_aliexpress, AliExpressColumns, AliExpressLoad};

use std::fmt::Write as _;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::calibrators::CalibrationRecord;
use crate::ranker::RankerModel;
use crate::{Error, Result};

pub const FORMAT_VERSION: u32 = 1;
const HEADER_TAG: &str = "#mlplatt-dataset";
const COLUMNS_TAG: &str = "#columns";

#[derive(Debug, Clone, PartialEq)]
pub struct Item {
    pub features: Vec<f64>,
    pub click: bool,
    /// Ground-truth click probability, known only for synthetic data.
    pub true_ctr: Option<f64>,
    /// Ranker score, present once a dataset has been scored.
    pub score: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Listing {
    pub id: u64,
    pub field: u32,
    pub ctx: Vec<f64>,
    pub items: Vec<Item>,
}

impl Listing {
    pub fn labels(&self) -> Vec<bool> {
        self.items.iter().map(|i| i.click).collect()
    }

    pub fn clicks(&self) -> usize {
        self.items.iter().filter(|i| i.click).count()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub ctx_dim: usize,
    pub item_dim: usize,
    pub field_name: String,
    pub listings: Vec<Listing>,
}

impl Dataset {
    pub fn new(ctx_dim: usize, item_dim: usize, field_name: impl Into<String>) -> Self {
        Self {
            ctx_dim,
            item_dim,
            field_name: field_name.into(),
            listings: Vec::new(),
        }
    }

    pub fn item_count(&self) -> usize {
        self.listings.iter().map(|l| l.items.len()).sum()
    }

    pub fn items(&self) -> impl Iterator<Item = (&Listing, &Item)> {
        self.listings
            .iter()
            .flat_map(|l| l.items.iter().map(move |i| (l, i)))
    }

    /// True when every item carries a ground-truth probability.
    pub fn has_ground_truth(&self) -> bool {
        self.item_count() > 0 && self.items().all(|(_, i)| i.true_ctr.is_some())
    }

    pub fn is_scored(&self) -> bool {
        self.item_count() > 0 && self.items().all(|(_, i)| i.score.is_some())
    }

    pub fn field_values(&self) -> Vec<u32> {
        let mut v: Vec<u32> = self.listings.iter().map(|l| l.field).collect();
        v.sort_unstable();
        v.dedup();
        v
    }

    /// Keeps only listings with at least one click; returns the number dropped.
    pub fn retain_clicked(&mut self) -> usize {
        let before = self.listings.len();
        self.listings.retain(|l| l.clicks() > 0);
        before - self.listings.len()
    }

    /// Copy of the dataset with every item's `score` set from the ranker.
    pub fn scored_by(&self, ranker: &RankerModel) -> Result<Dataset> {
        let mut out = self.clone();
        for listing in &mut out.listings {
            let scores = ranker.score_listing(listing)?;
            for (item, s) in listing.items.iter_mut().zip(scores) {
                item.score = Some(s);
            }
        }
        Ok(out)
    }

    pub fn validate(&self) -> Result<()> {
        if self.field_name.is_empty() || self.field_name.contains(char::is_whitespace) {
            return Err(Error::Schema(format!(
                "field name {:?} must be non-empty and free of whitespace",
                self.field_name
            )));
        }
        let mut seen = std::collections::HashSet::new();
        for l in &self.listings {
            if !seen.insert(l.id) {
                return Err(Error::Schema(format!("duplicate listing id {}", l.id)));
            }
            if l.ctx.len() != self.ctx_dim {
                return Err(Error::Schema(format!(
                    "listing {} has ctx dim {}, header says {}",
                    l.id,
                    l.ctx.len(),
                    self.ctx_dim
                )));
            }
            for item in &l.items {
                if item.features.len() != self.item_dim {
                    return Err(Error::Schema(format!(
                        "listing {} has item dim {}, header says {}",
                        l.id,
                        item.features.len(),
                        self.item_dim
                    )));
                }
                let values = l
                    .ctx
                    .iter()
                    .chain(&item.features)
                    .chain(item.true_ctr.as_ref())
                    .chain(item.score.as_ref());
                if values.clone().any(|v| !v.is_finite()) {
                    return Err(Error::Schema(format!(
                        "listing {} contains a non-finite value",
                        l.id
                    )));
                }
            }
        }
        Ok(())
    }

    fn header(&self) -> (bool, bool) {
        (self.has_ground_truth(), self.is_scored())
    }
}

fn write_row(out: &mut String, l: &Listing, item: &Item, truth: bool, scored: bool) {
    let _ = write!(out, "{}\t{}", l.id, l.field);
    for v in l.ctx.iter().chain(&item.features) {
        let _ = write!(out, "\t{v}");
    }
    let _ = write!(out, "\t{}", u8::from(item.click));
    if truth {
        let _ = write!(out, "\t{}", item.true_ctr.unwrap_or(f64::NAN));
    }
    if scored {
        let _ = write!(out, "\t{}", item.score.unwrap_or(f64::NAN));
    }
    out.push('\n');
}

/// Serialises a dataset to its text form.
pub fn dataset_to_string(data: &Dataset) -> Result<String> {
    data.validate()?;
    let (truth, scored) = data.header();
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{HEADER_TAG} version={FORMAT_VERSION} ctx_dim={} item_dim={} field={} ground_truth={} scored={}",
        data.ctx_dim,
        data.item_dim,
        data.field_name,
        u8::from(truth),
        u8::from(scored)
    );
    out.push_str(COLUMNS_TAG);
    for name in column_names(data.ctx_dim, data.item_dim, truth, scored) {
        out.push(' ');
        out.push_str(&name);
    }
    out.push('\n');
    for (l, item) in data.items() {
        write_row(&mut out, l, item, truth, scored);
    }
    Ok(out)
}

fn column_names(ctx_dim: usize, item_dim: usize, truth: bool, scored: bool) -> Vec<String> {
    let mut cols = vec!["listing_id".to_string(), "field".to_string()];
    cols.extend((0..ctx_dim).map(|i| format!("ctx_{i}")));
    cols.extend((0..item_dim).map(|i| format!("item_{i}")));
    cols.push("click".into());
    if truth {
        cols.push("true_ctr".into());
    }
    if scored {
        cols.push("r".into());
    }
    cols
}

pub fn write_dataset(data: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let text = dataset_to_string(data)?;
    let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
    file.write_all(text.as_bytes())?;
    file.flush()?;
    Ok(())
}

pub fn read_dataset(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::NotFound(path.to_path_buf()),
        _ => Error::Io(e),
    })?;
    parse_dataset(BufReader::new(file))
}

fn parse_err(line: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        line,
        message: message.into(),
    }
}

struct Header {
    ctx_dim: usize,
    item_dim: usize,
    field: String,
    truth: bool,
    scored: bool,
}

fn parse_header(line: &str) -> Result<Header> {
    let mut tokens = line.split_whitespace();
    if tokens.next() != Some(HEADER_TAG) {
        return Err(parse_err(1, format!("expected `{HEADER_TAG}` header")));
    }
    let mut version = None;
    let (mut ctx_dim, mut item_dim, mut field, mut truth, mut scored) =
        (None, None, None, None, None);
    for tok in tokens {
        let (key, value) = tok
            .split_once('=')
            .ok_or_else(|| parse_err(1, format!("malformed header token {tok:?}")))?;
        let num = || {
            value
                .parse::<usize>()
                .map_err(|_| parse_err(1, format!("bad value for {key}: {value:?}")))
        };
        let flag = || match value {
            "0" => Ok(false),
            "1" => Ok(true),
            _ => Err(parse_err(1, format!("bad flag for {key}: {value:?}"))),
        };
        match key {
            "version" => version = Some(num()?),
            "ctx_dim" => ctx_dim = Some(num()?),
            "item_dim" => item_dim = Some(num()?),
            "field" => field = Some(value.to_string()),
            "ground_truth" => truth = Some(flag()?),
            "scored" => scored = Some(flag()?),
            _ => return Err(parse_err(1, format!("unknown header key {key:?}"))),
        }
    }
    match version {
        Some(v) if v == FORMAT_VERSION as usize => {}
        Some(v) => return Err(parse_err(1, format!("unsupported format version {v}"))),
        None => return Err(parse_err(1, "missing version")),
    }
    let missing = |k: &str| parse_err(1, format!("missing header key {k}"));
    Ok(Header {
        ctx_dim: ctx_dim.ok_or_else(|| missing("ctx_dim"))?,
        item_dim: item_dim.ok_or_else(|| missing("item_dim"))?,
        field: field.ok_or_else(|| missing("field"))?,
        truth: truth.ok_or_else(|| missing("ground_truth"))?,
        scored: scored.ok_or_else(|| missing("scored"))?,
    })
}

/// Parses the text form written by [`write_dataset`].
pub fn parse_dataset<R: BufRead>(reader: R) -> Result<Dataset> {
    let mut lines = reader.lines().enumerate();
    let header_line = match lines.next() {
        Some((_, line)) => line?,
        None => return Err(parse_err(1, "empty file")),
    };
    let h = parse_header(&header_line)?;
    let expected_cols = column_names(h.ctx_dim, h.item_dim, h.truth, h.scored);
    match lines.next() {
        Some((_, line)) => {
            let line = line?;
            let mut toks = line.split_whitespace();
            if toks.next() != Some(COLUMNS_TAG) {
                return Err(parse_err(2, format!("expected `{COLUMNS_TAG}` line")));
            }
            let cols: Vec<&str> = toks.collect();
            if cols != expected_cols.iter().map(String::as_str).collect::<Vec<_>>() {
                return Err(Error::Schema(format!(
                    "column line {cols:?} does not match header (expected {expected_cols:?})"
                )));
            }
        }
        None => return Err(parse_err(2, "missing column line")),
    }

    let mut data = Dataset::new(h.ctx_dim, h.item_dim, h.field.clone());
    let mut seen = std::collections::HashSet::new();
    for (idx, line) in lines {
        let lineno = idx + 1;
        let line = line?;
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != expected_cols.len() {
            return Err(Error::Schema(format!(
                "line {lineno}: {} columns, header declares {}",
                fields.len(),
                expected_cols.len()
            )));
        }
        let float = |i: usize| -> Result<f64> {
            let v: f64 = fields[i]
                .parse()
                .map_err(|_| parse_err(lineno, format!("bad number {:?} in column {}", fields[i], expected_cols[i])))?;
            if !v.is_finite() {
                return Err(parse_err(lineno, format!("non-finite value in column {}", expected_cols[i])));
            }
            Ok(v)
        };
        let id: u64 = fields[0]
            .parse()
            .map_err(|_| parse_err(lineno, format!("bad listing id {:?}", fields[0])))?;
        let field: u32 = fields[1]
            .parse()
            .map_err(|_| parse_err(lineno, format!("bad field value {:?}", fields[1])))?;
        let ctx = (2..2 + h.ctx_dim).map(float).collect::<Result<Vec<_>>>()?;
        let base = 2 + h.ctx_dim;
        let features = (base..base + h.item_dim).map(float).collect::<Result<Vec<_>>>()?;
        let mut col = base + h.item_dim;
        let click = match fields[col] {
            "0" => false,
            "1" => true,
            other => return Err(parse_err(lineno, format!("click must be 0 or 1, got {other:?}"))),
        };
        col += 1;
        let true_ctr = if h.truth {
            let v = float(col)?;
            col += 1;
            Some(v)
        } else {
            None
        };
        let score = if h.scored { Some(float(col)?) } else { None };
        let item = Item {
            features,
            click,
            true_ctr,
            score,
        };
        match data.listings.last_mut() {
            Some(last) if last.id == id => {
                if last.field != field || last.ctx != ctx {
                    return Err(Error::Schema(format!(
                        "line {lineno}: listing {id} changes its field or context mid-listing"
                    )));
                }
                last.items.push(item);
            }
            _ => {
                if !seen.insert(id) {
                    return Err(Error::Schema(format!(
                        "line {lineno}: rows of listing {id} are not contiguous"
                    )));
                }
                data.listings.push(Listing {
                    id,
                    field,
                    ctx,
                    items: vec![item],
                });
            }
        }
    }
    Ok(data)
}

/// Splits by listing into `(train, test)`. The test side receives
/// `round(n · test_fraction)` listings, clamped so neither side is empty.
/// Listings keep their original relative order on both sides.
pub fn split(data: &Dataset, test_fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(Error::config(format!(
            "test fraction must lie in (0, 1), got {test_fraction}"
        )));
    }
    let n = data.listings.len();
    if n < 2 {
        return Err(Error::input("need at least two listings to split"));
    }
    let n_test = ((n as f64 * test_fraction).round() as usize).clamp(1, n - 1);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut is_test = vec![false; n];
    for &i in &order[..n_test] {
        is_test[i] = true;
    }
    let mut train = Dataset::new(data.ctx_dim, data.item_dim, data.field_name.clone());
    let mut test = train.clone();
    for (listing, &t) in data.listings.iter().zip(&is_test) {
        if t {
            test.listings.push(listing.clone());
        } else {
            train.listings.push(listing.clone());
        }
    }
    Ok((train, test))
}

/// Where the calibrator's context vector comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ContextSource {
    /// The listing's raw context features.
    #[default]
    Raw,
    /// The ranker's last hidden activation for the context with item features zeroed.
    RankerEmbedding,
}

/// One calibration record per item: the ranker score, the context vector, the
/// field value, and the click label.
pub fn build_calibration_set(
    ranker: &RankerModel,
    data: &Dataset,
    source: ContextSource,
) -> Result<Vec<CalibrationRecord>> {
    if ranker.ctx_dim() != data.ctx_dim || ranker.item_dim() != data.item_dim {
        return Err(Error::Dimension(format!(
            "ranker layout ({}, {}) does not match dataset ({}, {})",
            ranker.ctx_dim(),
            ranker.item_dim(),
            data.ctx_dim,
            data.item_dim
        )));
    }
    let mut records = Vec::with_capacity(data.item_count());
    for listing in &data.listings {
        let scores = ranker.score_listing(listing)?;
        let ctx = match source {
            ContextSource::Raw => listing.ctx.clone(),
            ContextSource::RankerEmbedding => ranker.context_embedding(&listing.ctx)?,
        };
        for (item, r) in listing.items.iter().zip(scores) {
            records.push(CalibrationRecord {
                r,
                ctx: ctx.clone(),
                field: listing.field,
                click: item.click,
                listing: listing.id,
            });
        }
    }
    Ok(records)
}
