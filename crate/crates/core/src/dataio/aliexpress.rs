//! Loader for a columnar (CSV) export of the AliExpress search log.
//!
//! Column names differ between mirrors, so every column is taken from an
//! [`AliExpressColumns`] mapping. Country becomes the field; its one-hot code
//! is appended to the context vector so context-aware calibrators can see it.

use std::collections::{BTreeSet, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Dataset, Item, Listing};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AliExpressColumns {
    pub listing_id: String,
    pub country: String,
    pub click: String,
    pub ctx_features: Vec<String>,
    pub item_features: Vec<String>,
    /// Countries dropped before anything else.
    pub exclude_countries: Vec<String>,
}

impl Default for AliExpressColumns {
    fn default() -> Self {
        Self {
            listing_id: "search_id".into(),
            country: "country".into(),
            click: "click".into(),
            ctx_features: Vec::new(),
            item_features: Vec::new(),
            exclude_countries: vec!["RU".into()],
        }
    }
}

#[derive(Debug, Clone)]
pub struct AliExpressLoad {
    pub dataset: Dataset,
    /// Kept country codes; field value `z` indexes this list.
    pub countries: Vec<String>,
    pub input_rows: usize,
    pub kept_rows: usize,
    pub dropped_rows: usize,
    pub dropped_listings: usize,
}

pub fn load_aliexpress(path: impl AsRef<Path>, columns: &AliExpressColumns) -> Result<AliExpressLoad> {
    let path = path.as_ref();
    if !path.exists() {
        return Err(Error::NotFound(path.to_path_buf()));
    }
    let mut reader = csv::Reader::from_path(path)
        .map_err(|e| Error::Schema(format!("cannot open {}: {e}", path.display())))?;
    let headers = reader
        .headers()
        .map_err(|e| Error::Schema(format!("cannot read header: {e}")))?
        .clone();
    let index: HashMap<&str, usize> = headers.iter().enumerate().map(|(i, h)| (h, i)).collect();
    let wanted: Vec<&String> = [&columns.listing_id, &columns.country, &columns.click]
        .into_iter()
        .chain(&columns.ctx_features)
        .chain(&columns.item_features)
        .collect();
    let missing: Vec<&str> = wanted
        .iter()
        .filter(|c| !index.contains_key(c.as_str()))
        .map(|c| c.as_str())
        .collect();
    if !missing.is_empty() {
        return Err(Error::Schema(format!(
            "columns not found in export: {}",
            missing.join(", ")
        )));
    }
    let col = |name: &String| index[name.as_str()];
    let (id_col, country_col, click_col) =
        (col(&columns.listing_id), col(&columns.country), col(&columns.click));
    let ctx_cols: Vec<usize> = columns.ctx_features.iter().map(col).collect();
    let item_cols: Vec<usize> = columns.item_features.iter().map(col).collect();

    struct Raw {
        country: String,
        ctx: Vec<f64>,
        items: Vec<Item>,
    }
    let mut order: Vec<String> = Vec::new();
    let mut groups: HashMap<String, Raw> = HashMap::new();
    let mut input_rows = 0usize;
    let mut filtered_rows = 0usize;
    for (i, row) in reader.records().enumerate() {
        let line = i + 2;
        let row = row.map_err(|e| Error::Parse {
            line,
            message: e.to_string(),
        })?;
        input_rows += 1;
        let country = row[country_col].trim().to_string();
        if columns.exclude_countries.iter().any(|c| c == &country) {
            filtered_rows += 1;
            continue;
        }
        let number = |c: usize| -> Result<f64> {
            row[c].trim().parse::<f64>().map_err(|_| Error::Parse {
                line,
                message: format!("bad number {:?} in column {}", &row[c], &headers[c]),
            })
        };
        let click = match row[click_col].trim() {
            "0" | "0.0" => false,
            "1" | "1.0" => true,
            other => {
                return Err(Error::Parse {
                    line,
                    message: format!("click must be 0 or 1, got {other:?}"),
                })
            }
        };
        let features = item_cols.iter().map(|&c| number(c)).collect::<Result<Vec<_>>>()?;
        let id = row[id_col].trim().to_string();
        let entry = match groups.get_mut(&id) {
            Some(entry) => entry,
            None => {
                let ctx = ctx_cols.iter().map(|&c| number(c)).collect::<Result<Vec<_>>>()?;
                order.push(id.clone());
                groups.entry(id.clone()).or_insert(Raw {
                    country,
                    ctx,
                    items: Vec::new(),
                })
            }
        };
        entry.items.push(Item {
            features,
            click,
            true_ctr: None,
            score: None,
        });
    }

    let countries: Vec<String> = groups
        .values()
        .map(|g| g.country.clone())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let code: HashMap<&str, u32> = countries
        .iter()
        .enumerate()
        .map(|(i, c)| (c.as_str(), i as u32))
        .collect();
    let mut dataset = Dataset::new(
        columns.ctx_features.len() + countries.len(),
        columns.item_features.len(),
        "country",
    );
    for (next_id, raw_id) in order.iter().enumerate() {
        let raw = groups.remove(raw_id).expect("grouped id");
        let z = code[raw.country.as_str()];
        let mut ctx = raw.ctx;
        ctx.extend((0..countries.len() as u32).map(|k| if k == z { 1.0 } else { 0.0 }));
        dataset.listings.push(Listing {
            id: next_id as u64,
            field: z,
            ctx,
            items: raw.items,
        });
    }
    let before_rows = dataset.item_count();
    let dropped_listings = dataset.retain_clicked();
    let kept_rows = dataset.item_count();
    log::info!(
        "aliexpress: kept {kept_rows} of {input_rows} rows; dropped {dropped_listings} listings without clicks"
    );
    Ok(AliExpressLoad {
        dataset,
        countries,
        input_rows,
        kept_rows,
        dropped_rows: filtered_rows + (before_rows - kept_rows),
        dropped_listings,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    const EXPORT: &str = "search_id,country,f_user,f_item,click
a,NL,0.5,1.0,1
a,NL,0.5,2.0,0
b,RU,1.0,0.0,1
c,ES,0.0,-1.0,0
c,ES,0.0,3.0,0
d,FR,2.0,1.5,0
d,FR,2.0,0.5,1
e,US,1.0,1.0,1
";

    fn columns() -> AliExpressColumns {
        AliExpressColumns {
            ctx_features: vec!["f_user".into()],
            item_features: vec!["f_item".into()],
            ..AliExpressColumns::default()
        }
    }

    fn write_export(text: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        std::io::Write::write_all(&mut f, text.as_bytes()).unwrap();
        f
    }

    #[test]
    fn filters_and_counts() {
        let f = write_export(EXPORT);
        let load = load_aliexpress(f.path(), &columns()).unwrap();
        assert_eq!(load.countries, vec!["ES", "FR", "NL", "US"]);
        assert_eq!(load.dataset.listings.len(), 3);
        assert_eq!(load.dropped_listings, 1);
        assert_eq!(load.kept_rows + load.dropped_rows, load.input_rows);
        assert_eq!(load.dataset.ctx_dim, 1 + 4);
        assert!(load.dataset.listings.iter().all(|l| l.clicks() > 0));
        let nl = &load.dataset.listings[0];
        assert_eq!(nl.field, 2);
        assert_eq!(nl.ctx, vec![0.5, 0.0, 0.0, 1.0, 0.0]);
    }

    #[test]
    fn missing_columns_are_listed() {
        let f = write_export(EXPORT);
        let mut cols = columns();
        cols.item_features.push("price".into());
        cols.click = "is_click".into();
        let err = load_aliexpress(f.path(), &cols).unwrap_err().to_string();
        assert!(err.contains("is_click") && err.contains("price"), "{err}");
    }

    #[test]
    fn missing_file() {
        assert!(matches!(
            load_aliexpress("/definitely/not/here.csv", &columns()),
            Err(Error::NotFound(_))
        ));
    }
}
