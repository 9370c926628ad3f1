//! Fold-level cross-validation results: parsing, validation, and the
//! pairwise-complete difference data that feeds the hierarchical model.
//!
//! Dataset ordering is lexicographic everywhere so that the model's
//! per-dataset parameter indices are reproducible.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Read;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Prior upper bound used when an observed scale is exactly zero.
pub const SCALE_FLOOR: f64 = 1e-6;

/// Default multiplier between observed scales and the uniform prior bounds.
pub const DEFAULT_BOUND_MULTIPLIER: f64 = 1000.0;

#[derive(Debug, Error)]
pub enum ResultsError {
    #[error("line {line}: malformed row: {reason}")]
    MalformedRow { line: usize, reason: String },
    #[error("duplicate record for dataset `{dataset}`, method `{method}`, fold {fold}")]
    DuplicateRecord {
        dataset: String,
        method: String,
        fold: usize,
    },
    #[error("value {value} for dataset `{dataset}`, method `{method}`, fold {fold} is outside [0, 1]")]
    ValueOutOfRange {
        dataset: String,
        method: String,
        fold: usize,
        value: f64,
    },
    #[error("method `{method}` on dataset `{dataset}` has folds {found:?}, expected 0..{expected}")]
    InconsistentFoldSet {
        dataset: String,
        method: String,
        found: Vec<usize>,
        expected: usize,
    },
    #[error("dataset `{dataset}` has {k} fold(s); at least 2 are required")]
    TooFewFolds { dataset: String, k: usize },
    #[error("unknown method `{0}`")]
    UnknownMethod(String),
    #[error("methods `{0}` and `{1}` share no dataset with complete folds")]
    NoCommonDatasets(String, String),
    #[error("bound multiplier must be positive and finite, got {0}")]
    InvalidMultiplier(f64),
    #[error("input is not valid UTF-8")]
    InvalidUtf8,
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InputFormat {
    Csv,
    Json,
}

impl InputFormat {
    /// Guess the format from a file extension; anything but `.json` is CSV.
    pub fn from_path(path: &std::path::Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some(ext) if ext.eq_ignore_ascii_case("json") => InputFormat::Json,
            _ => InputFormat::Csv,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldRecord {
    #[serde(rename = "dataset")]
    pub dataset_id: String,
    #[serde(rename = "method")]
    pub method_id: String,
    #[serde(rename = "fold")]
    pub fold_index: usize,
    pub value: f64,
    #[serde(rename = "metric", default, skip_serializing_if = "Option::is_none")]
    pub metric_name: Option<String>,
}

/// A validated collection of fold records.
///
/// Records are kept sorted by (dataset, method, fold). Within a dataset every
/// method covers folds `0..K`.
#[derive(Debug, Clone, PartialEq)]
pub struct ResultTable {
    records: Vec<FoldRecord>,
    folds_per_dataset: BTreeMap<String, usize>,
    method_order: Vec<String>,
}

impl ResultTable {
    /// Validate a set of records and build a table.
    pub fn from_records(records: Vec<FoldRecord>) -> Result<Self, ResultsError> {
        let mut method_order: Vec<String> = Vec::new();
        let mut seen_methods = BTreeSet::new();
        let mut cells: BTreeMap<(String, String), BTreeSet<usize>> = BTreeMap::new();

        for r in &records {
            if !(0.0..=1.0).contains(&r.value) || !r.value.is_finite() {
                return Err(ResultsError::ValueOutOfRange {
                    dataset: r.dataset_id.clone(),
                    method: r.method_id.clone(),
                    fold: r.fold_index,
                    value: r.value,
                });
            }
            if seen_methods.insert(r.method_id.clone()) {
                method_order.push(r.method_id.clone());
            }
            let folds = cells
                .entry((r.dataset_id.clone(), r.method_id.clone()))
                .or_default();
            if !folds.insert(r.fold_index) {
                return Err(ResultsError::DuplicateRecord {
                    dataset: r.dataset_id.clone(),
                    method: r.method_id.clone(),
                    fold: r.fold_index,
                });
            }
        }

        // K for a dataset is the largest fold count any method reports there;
        // every method must then cover exactly 0..K.
        let mut folds_per_dataset: BTreeMap<String, usize> = BTreeMap::new();
        for ((dataset, _), folds) in &cells {
            let k = folds_per_dataset.entry(dataset.clone()).or_insert(0);
            *k = (*k).max(folds.len());
        }
        for ((dataset, method), folds) in &cells {
            let k = folds_per_dataset[dataset];
            let complete = folds.len() == k && folds.iter().copied().eq(0..k);
            if !complete {
                return Err(ResultsError::InconsistentFoldSet {
                    dataset: dataset.clone(),
                    method: method.clone(),
                    found: folds.iter().copied().collect(),
                    expected: k,
                });
            }
        }

        let mut records = records;
        records.sort_by(|a, b| {
            (&a.dataset_id, &a.method_id, a.fold_index).cmp(&(&b.dataset_id, &b.method_id, b.fold_index))
        });

        Ok(Self {
            records,
            folds_per_dataset,
            method_order,
        })
    }

    pub fn records(&self) -> &[FoldRecord] {
        &self.records
    }

    pub fn folds_per_dataset(&self) -> &BTreeMap<String, usize> {
        &self.folds_per_dataset
    }

    /// Methods in order of first appearance in the input.
    pub fn methods(&self) -> &[String] {
        &self.method_order
    }

    pub fn has_method(&self, method: &str) -> bool {
        self.method_order.iter().any(|m| m == method)
    }

    /// Fold values of `method` on `dataset`, ordered by fold index.
    pub fn fold_values(&self, dataset: &str, method: &str) -> Option<Vec<f64>> {
        let values: Vec<f64> = self
            .records
            .iter()
            .filter(|r| r.dataset_id == dataset && r.method_id == method)
            .map(|r| r.value)
            .collect();
        (!values.is_empty()).then_some(values)
    }

    /// Metric name recorded for a dataset, if any row carries one.
    pub fn metric_for(&self, dataset: &str) -> Option<&str> {
        self.records
            .iter()
            .find(|r| r.dataset_id == dataset && r.metric_name.is_some())
            .and_then(|r| r.metric_name.as_deref())
    }

    /// Serialize as CSV with the `dataset,method,fold,value[,metric]` header.
    pub fn to_csv(&self) -> String {
        let with_metric = self.records.iter().any(|r| r.metric_name.is_some());
        let mut out = String::from(if with_metric {
            "dataset,method,fold,value,metric\n"
        } else {
            "dataset,method,fold,value\n"
        });
        let mut w = csv::WriterBuilder::new()
            .has_headers(false)
            .terminator(csv::Terminator::Any(b'\n'))
            .from_writer(Vec::new());
        for r in &self.records {
            // `{:?}` on f64 is the shortest representation that round-trips.
            let value = format!("{:?}", r.value);
            let fold = r.fold_index.to_string();
            let mut row = vec![r.dataset_id.as_str(), r.method_id.as_str(), fold.as_str(), value.as_str()];
            if with_metric {
                row.push(r.metric_name.as_deref().unwrap_or(""));
            }
            w.write_record(&row).expect("writing to memory");
        }
        out.push_str(&String::from_utf8(w.into_inner().expect("flush to memory")).expect("utf-8"));
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.records).expect("records serialize")
    }
}

/// Parse and validate fold-level results.
pub fn parse_results<R: Read>(mut input: R, format: InputFormat) -> Result<ResultTable, ResultsError> {
    let mut bytes = Vec::new();
    input.read_to_end(&mut bytes)?;
    let text = String::from_utf8(bytes).map_err(|_| ResultsError::InvalidUtf8)?;
    let records = match format {
        InputFormat::Csv => parse_csv_records(&text)?,
        InputFormat::Json => parse_json_records(&text)?,
    };
    ResultTable::from_records(records)
}

fn parse_csv_records(text: &str) -> Result<Vec<FoldRecord>, ResultsError> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_reader(text.as_bytes());
    let mut rows = reader.records();

    let header = match rows.next() {
        Some(row) => row.map_err(|e| csv_error(1, e))?,
        None => {
            return Err(ResultsError::MalformedRow {
                line: 1,
                reason: "missing header".into(),
            })
        }
    };
    let fields: Vec<&str> = header.iter().map(str::trim).collect();
    let with_metric = match fields.as_slice() {
        ["dataset", "method", "fold", "value"] => false,
        ["dataset", "method", "fold", "value", "metric"] => true,
        _ => {
            return Err(ResultsError::MalformedRow {
                line: 1,
                reason: format!(
                    "expected header `dataset,method,fold,value[,metric]`, got `{}`",
                    fields.join(",")
                ),
            })
        }
    };
    let width = if with_metric { 5 } else { 4 };

    let mut records = Vec::new();
    for row in rows {
        let row = row.map_err(|e| csv_error(0, e))?;
        let line = row.position().map(|p| p.line() as usize).unwrap_or(0);
        if row.len() == 1 && row[0].trim().is_empty() {
            continue;
        }
        if row.len() != width {
            return Err(ResultsError::MalformedRow {
                line,
                reason: format!("expected {width} fields, found {}", row.len()),
            });
        }
        let dataset = row[0].trim();
        let method = row[1].trim();
        if dataset.is_empty() || method.is_empty() {
            return Err(ResultsError::MalformedRow {
                line,
                reason: "empty dataset or method".into(),
            });
        }
        let fold = row[2].trim().parse::<usize>().map_err(|e| ResultsError::MalformedRow {
            line,
            reason: format!("fold `{}`: {e}", &row[2]),
        })?;
        let value = row[3].trim().parse::<f64>().map_err(|e| ResultsError::MalformedRow {
            line,
            reason: format!("value `{}`: {e}", &row[3]),
        })?;
        let metric_name = if with_metric {
            let m = row[4].trim();
            (!m.is_empty()).then(|| m.to_string())
        } else {
            None
        };
        records.push(FoldRecord {
            dataset_id: dataset.to_string(),
            method_id: method.to_string(),
            fold_index: fold,
            value,
            metric_name,
        });
    }
    Ok(records)
}

fn csv_error(fallback_line: usize, e: csv::Error) -> ResultsError {
    let line = e
        .position()
        .map(|p| p.line() as usize)
        .unwrap_or(fallback_line);
    ResultsError::MalformedRow {
        line,
        reason: e.to_string(),
    }
}

fn parse_json_records(text: &str) -> Result<Vec<FoldRecord>, ResultsError> {
    serde_json::from_str::<Vec<FoldRecord>>(text).map_err(|e| ResultsError::MalformedRow {
        line: e.line(),
        reason: e.to_string(),
    })
}

/// Fold differences for one dataset in a pairwise comparison.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetDifferences {
    pub dataset_id: String,
    pub differences: Vec<f64>,
    /// Sample SD of the fold differences.
    pub sd: f64,
    /// Upper bound of the uniform prior on this dataset's scale.
    pub sd_bound: f64,
}

impl DatasetDifferences {
    pub fn folds(&self) -> usize {
        self.differences.len()
    }

    pub fn mean(&self) -> f64 {
        mean(&self.differences)
    }
}

/// Aligned fold differences `x[d][f] = s(d, i, f) - s(d, j, f)` for one
/// comparison, plus the scale statistics the priors need.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairData {
    pub method_i: String,
    pub method_j: String,
    pub datasets: Vec<DatasetDifferences>,
    /// SD across datasets of the per-dataset mean differences.
    pub s_xbar: f64,
    /// Upper bound of the uniform prior on the population scale.
    pub s0_bar: f64,
    pub bound_multiplier: f64,
    /// Set when any scale was zero and replaced by [`SCALE_FLOOR`].
    pub degenerate_scale: bool,
}

impl PairData {
    /// Build pair data directly from difference vectors (scales left unset).
    pub fn from_differences(
        method_i: impl Into<String>,
        method_j: impl Into<String>,
        mut datasets: Vec<(String, Vec<f64>)>,
    ) -> Self {
        datasets.sort_by(|a, b| a.0.cmp(&b.0));
        Self {
            method_i: method_i.into(),
            method_j: method_j.into(),
            datasets: datasets
                .into_iter()
                .map(|(dataset_id, differences)| DatasetDifferences {
                    dataset_id,
                    differences,
                    sd: 0.0,
                    sd_bound: SCALE_FLOOR,
                })
                .collect(),
            s_xbar: 0.0,
            s0_bar: SCALE_FLOOR,
            bound_multiplier: 0.0,
            degenerate_scale: false,
        }
    }

    pub fn n_datasets(&self) -> usize {
        self.datasets.len()
    }

    pub fn dataset_means(&self) -> Vec<f64> {
        self.datasets.iter().map(DatasetDifferences::mean).collect()
    }
}

/// Align the fold results of two methods on every dataset where both are
/// present. Datasets missing either method are skipped.
pub fn pairwise_differences(
    table: &ResultTable,
    method_i: &str,
    method_j: &str,
) -> Result<PairData, ResultsError> {
    for m in [method_i, method_j] {
        if !table.has_method(m) {
            return Err(ResultsError::UnknownMethod(m.to_string()));
        }
    }
    let mut datasets = Vec::new();
    for (dataset, &k) in table.folds_per_dataset() {
        let (Some(a), Some(b)) = (
            table.fold_values(dataset, method_i),
            table.fold_values(dataset, method_j),
        ) else {
            continue;
        };
        if k < 2 {
            return Err(ResultsError::TooFewFolds {
                dataset: dataset.clone(),
                k,
            });
        }
        let diffs = a.iter().zip(&b).map(|(x, y)| x - y).collect();
        datasets.push((dataset.clone(), diffs));
    }
    if datasets.is_empty() {
        return Err(ResultsError::NoCommonDatasets(
            method_i.to_string(),
            method_j.to_string(),
        ));
    }
    Ok(PairData::from_differences(method_i, method_j, datasets))
}

/// Fill in the population and per-dataset scales and their prior bounds.
///
/// Zero scales are floored at [`SCALE_FLOOR`] and flagged.
pub fn population_scales(mut pair: PairData, bound_multiplier: f64) -> Result<PairData, ResultsError> {
    if !(bound_multiplier > 0.0 && bound_multiplier.is_finite()) {
        return Err(ResultsError::InvalidMultiplier(bound_multiplier));
    }
    let means = pair.dataset_means();
    let mut degenerate = false;
    let mut bound = |sd: f64| {
        let b = bound_multiplier * sd;
        if b > 0.0 && b.is_finite() {
            b
        } else {
            degenerate = true;
            SCALE_FLOOR
        }
    };

    pair.s_xbar = sample_sd(&means);
    pair.s0_bar = bound(pair.s_xbar);
    for d in &mut pair.datasets {
        d.sd = sample_sd(&d.differences);
        d.sd_bound = bound(d.sd);
    }
    pair.bound_multiplier = bound_multiplier;
    pair.degenerate_scale = degenerate;
    Ok(pair)
}

pub(crate) fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Sample standard deviation with the `n - 1` denominator; zero for n < 2.
pub(crate) fn sample_sd(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    let m = mean(xs);
    let ss: f64 = xs.iter().map(|x| (x - m) * (x - m)).sum();
    (ss / (xs.len() - 1) as f64).sqrt()
}
