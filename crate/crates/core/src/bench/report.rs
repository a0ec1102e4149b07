//! Result tables and their text renderings.

use std::fmt::Write as _;

/// Which direction of a column counts as better.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Better {
    Lower,
    Higher,
    Neither,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Column {
    pub name: String,
    pub better: Better,
}

impl Column {
    pub fn new(name: impl Into<String>, better: Better) -> Self {
        Self {
            name: name.into(),
            better,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Row {
    pub label: String,
    /// Mean over seeds, one value per column.
    pub values: Vec<f64>,
    /// Values per seed, in seed order.
    pub per_seed: Vec<Vec<f64>>,
    /// Bootstrap p-values against the reference row for the leading columns;
    /// `None` for the reference row itself.
    pub p_values: Option<Vec<f64>>,
}

impl Row {
    pub fn from_seeds(label: impl Into<String>, per_seed: Vec<Vec<f64>>) -> Self {
        let width = per_seed.first().map_or(0, Vec::len);
        let values = (0..width)
            .map(|k| per_seed.iter().map(|v| v[k]).sum::<f64>() / per_seed.len() as f64)
            .collect();
        Self {
            label: label.into(),
            values,
            per_seed,
            p_values: None,
        }
    }

    pub fn value(&self, column: usize) -> f64 {
        self.values[column]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub title: String,
    pub key: String,
    pub columns: Vec<Column>,
    pub rows: Vec<Row>,
    /// Label of the row significance is measured against, when the table has
    /// a significance column.
    pub reference: Option<String>,
    pub significance_level: f64,
}

pub(crate) fn format_value(v: f64) -> String {
    if v.is_nan() {
        "n/a".into()
    } else if v != 0.0 && v.abs() < 1e-3 {
        format!("{v:.2e}")
    } else {
        format!("{v:.4}")
    }
}

fn format_p(p: f64) -> String {
    if p < 1e-3 {
        "<0.001".into()
    } else {
        format!("{p:.3}")
    }
}

/// Compact label for a penalty weight or blend factor: `0`, `0.5`, `1`,
/// `1e-4`, `2.5e-3`.
pub fn short_float(x: f64) -> String {
    if x == 0.0 || x.abs() >= 0.1 {
        format!("{x}")
    } else {
        format!("{x:e}")
    }
}

impl Table {
    pub fn row(&self, label: &str) -> Option<&Row> {
        self.rows.iter().find(|r| r.label == label)
    }

    pub fn column(&self, name: &str) -> Option<usize> {
        self.columns.iter().position(|c| c.name == name)
    }

    /// Value of `column` in the row labelled `label`.
    pub fn get(&self, label: &str, column: &str) -> Option<f64> {
        Some(self.row(label)?.value(self.column(column)?))
    }

    fn has_significance(&self) -> bool {
        self.reference.is_some() && self.rows.len() > 1
    }

    fn best(&self, column: usize) -> Option<f64> {
        let values = self.rows.iter().map(|r| r.values[column]).filter(|v| !v.is_nan());
        match self.columns[column].better {
            Better::Lower => values.reduce(f64::min),
            Better::Higher => values.reduce(f64::max),
            Better::Neither => None,
        }
    }

    /// Markdown table. The best value of each rated column is bold; a star
    /// marks a significant difference from the reference row.
    pub fn to_markdown(&self) -> String {
        let significance = self.has_significance();
        let mut out = format!("## {}\n\n| Method |", self.title);
        for c in &self.columns {
            let _ = write!(out, " {} |", c.name);
        }
        let tested: Vec<&str> = self
            .rows
            .iter()
            .find_map(|r| r.p_values.as_ref())
            .map(|p| self.columns[..p.len()].iter().map(|c| c.name.as_str()).collect())
            .unwrap_or_default();
        if significance {
            let _ = write!(out, " p vs {} ({}) |", self.reference.as_deref().unwrap_or(""), tested.join(" / "));
        }
        out.push_str("\n|---|");
        for _ in &self.columns {
            out.push_str("---:|");
        }
        if significance {
            out.push_str("---|");
        }
        out.push('\n');
        let best: Vec<Option<f64>> = (0..self.columns.len())
            .map(|k| if self.rows.len() > 1 { self.best(k) } else { None })
            .collect();
        for row in &self.rows {
            let _ = write!(out, "| {} |", row.label);
            for (k, &v) in row.values.iter().enumerate() {
                let mut cell = format_value(v);
                if best[k] == Some(v) {
                    cell = format!("**{cell}**");
                }
                let starred = row
                    .p_values
                    .as_ref()
                    .and_then(|p| p.get(k))
                    .is_some_and(|&p| p < self.significance_level);
                if starred {
                    cell.push('*');
                }
                let _ = write!(out, " {cell} |");
            }
            if significance {
                match &row.p_values {
                    Some(p) => {
                        let cells: Vec<String> = p.iter().map(|&x| format_p(x)).collect();
                        let _ = write!(out, " {} |", cells.join(" / "));
                    }
                    None => out.push_str(" reference |"),
                }
            }
            out.push('\n');
        }
        if significance {
            let _ = writeln!(
                out,
                "\nBold: best per column. *: paired listing bootstrap p < {} against {}.",
                self.significance_level,
                self.reference.as_deref().unwrap_or("")
            );
        }
        out
    }

    /// One `key=value` line per row and seed, then one per row for the means.
    pub fn to_records(&self, seeds: &[u64]) -> String {
        let key = |name: &str| name.to_lowercase().replace([' ', '-'], "_");
        let mut out = String::new();
        for row in &self.rows {
            for (seed, values) in seeds.iter().zip(&row.per_seed) {
                let _ = write!(out, "table={} method={} seed={seed}", self.key, row.label.replace(' ', "_"));
                for (c, v) in self.columns.iter().zip(values) {
                    let _ = write!(out, " {}={v}", key(&c.name));
                }
                out.push('\n');
            }
            let _ = write!(out, "table={} method={} seed=mean", self.key, row.label.replace(' ', "_"));
            for (c, v) in self.columns.iter().zip(&row.values) {
                let _ = write!(out, " {}={v}", key(&c.name));
            }
            if let Some(p) = &row.p_values {
                for (c, v) in self.columns.iter().zip(p) {
                    let _ = write!(out, " p_{}={v}", key(&c.name));
                }
            }
            out.push('\n');
        }
        out
    }
}
