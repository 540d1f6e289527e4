//! Tabular dataset ingestion and training-view materialization.
//!
//! A [`Dataset`] is immutable once loaded. The expert's choices (which
//! features feed the models, which column is the class, and whether each
//! class is known, unknown or excluded) live in a [`SelectionState`] value
//! that is turned into a standardized [`DataView`] on demand.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::sync::{Arc, RwLock};

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ColumnKind {
    Numeric,
    Categorical,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ColumnSchema {
    pub name: String,
    pub kind: ColumnKind,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetSchema {
    pub columns: Vec<ColumnSchema>,
    pub row_count: usize,
}

impl DatasetSchema {
    pub fn column_index(&self, name: &str) -> Option<usize> {
        self.columns.iter().position(|c| c.name == name)
    }
}

/// A loaded table.
///
/// Numeric columns are stored in `numeric_data` (row-major, one column per
/// numeric schema column in schema order); categorical columns keep their
/// strings. The original text of every cell is retained so that class values
/// compare as exact strings and point inspection shows what was uploaded.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub id: String,
    pub schema: DatasetSchema,
    pub numeric_data: Array2<f64>,
    pub categorical_data: Vec<Vec<String>>,
    raw: Vec<Vec<String>>,
    numeric_slot: Vec<Option<usize>>,
}

fn parse_real(s: &str) -> Option<f64> {
    s.trim().parse::<f64>().ok().filter(|v| v.is_finite())
}

/// Parses a comma-separated table. Cells may be double-quoted.
pub fn load_csv(bytes: &[u8], has_header: bool) -> Result<Dataset> {
    if bytes.iter().all(|b| b.is_ascii_whitespace()) {
        return Err(Error::EmptyInput("no data".into()));
    }
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_reader(bytes);

    let mut records: Vec<Vec<String>> = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        let rec = rec.map_err(|e| Error::RaggedInput(format!("record {i}: {e}")))?;
        records.push(rec.iter().map(|s| s.to_string()).collect());
    }
    // Trailing blank lines are skipped by the csv reader; an all-empty
    // record is still possible from a lone comma-less line of spaces.
    records.retain(|r| !(r.len() == 1 && r[0].trim().is_empty()));

    let width = records.first().map(|r| r.len()).unwrap_or(0);
    if width == 0 {
        return Err(Error::EmptyInput("zero columns".into()));
    }
    if let Some((i, r)) = records.iter().enumerate().find(|(_, r)| r.len() != width) {
        return Err(Error::RaggedInput(format!(
            "line {} has {} fields, expected {width}",
            i + 1,
            r.len()
        )));
    }

    let names: Vec<String> = if has_header {
        records.remove(0).into_iter().map(|s| s.trim().to_string()).collect()
    } else {
        (0..width).map(|j| format!("col_{j}")).collect()
    };
    if records.is_empty() {
        return Err(Error::EmptyInput("no data rows".into()));
    }
    let mut seen = HashSet::new();
    for n in &names {
        if n.is_empty() {
            return Err(Error::BadConfig("empty column name".into()));
        }
        if !seen.insert(n.as_str()) {
            return Err(Error::BadConfig(format!("duplicate column name {n:?}")));
        }
    }

    let n_rows = records.len();
    let mut raw: Vec<Vec<String>> = vec![Vec::with_capacity(n_rows); width];
    for (i, rec) in records.into_iter().enumerate() {
        for (j, cell) in rec.into_iter().enumerate() {
            if cell.trim().is_empty() {
                return Err(Error::MissingValue {
                    row: i,
                    column: names[j].clone(),
                });
            }
            raw[j].push(cell);
        }
    }

    let kinds: Vec<ColumnKind> = raw
        .iter()
        .map(|col| {
            if col.iter().all(|v| parse_real(v).is_some()) {
                ColumnKind::Numeric
            } else {
                ColumnKind::Categorical
            }
        })
        .collect();

    let numeric_cols: Vec<usize> = (0..width).filter(|&j| kinds[j] == ColumnKind::Numeric).collect();
    let mut numeric_slot = vec![None; width];
    let mut numeric_data = Array2::<f64>::zeros((n_rows, numeric_cols.len()));
    for (slot, &j) in numeric_cols.iter().enumerate() {
        numeric_slot[j] = Some(slot);
        for (i, v) in raw[j].iter().enumerate() {
            numeric_data[[i, slot]] = parse_real(v).expect("checked numeric");
        }
    }
    let categorical_data = (0..width)
        .filter(|&j| kinds[j] == ColumnKind::Categorical)
        .map(|j| raw[j].clone())
        .collect();

    let columns = names
        .into_iter()
        .zip(kinds)
        .map(|(name, kind)| ColumnSchema { name, kind })
        .collect();

    Ok(Dataset {
        id: uuid::Uuid::new_v4().to_string(),
        schema: DatasetSchema {
            columns,
            row_count: n_rows,
        },
        numeric_data,
        categorical_data,
        raw,
        numeric_slot,
    })
}

impl Dataset {
    pub fn row_count(&self) -> usize {
        self.schema.row_count
    }

    fn column(&self, name: &str) -> Result<usize> {
        self.schema
            .column_index(name)
            .ok_or_else(|| Error::UnknownColumn(name.to_string()))
    }

    /// Original text of every cell in `column`.
    pub fn column_values(&self, name: &str) -> Result<&[String]> {
        Ok(&self.raw[self.column(name)?])
    }

    /// Numeric values of `name`; fails for categorical columns.
    pub fn numeric_column(&self, name: &str) -> Result<ndarray::ArrayView1<'_, f64>> {
        let j = self.column(name)?;
        let slot = self.numeric_slot[j]
            .ok_or_else(|| Error::BadConfig(format!("column {name:?} is not numeric")))?;
        Ok(self.numeric_data.column(slot))
    }

    /// Every attribute of one row, in schema order, as uploaded.
    pub fn row_record(&self, row: usize) -> Option<Vec<(String, String)>> {
        (row < self.row_count()).then(|| {
            self.schema
                .columns
                .iter()
                .zip(&self.raw)
                .map(|(c, col)| (c.name.clone(), col[row].clone()))
                .collect()
        })
    }

    /// Distinct values of `target` with counts, most frequent first and
    /// lexicographic among equal counts.
    pub fn list_class_values(&self, target: &str) -> Result<Vec<(String, usize)>> {
        let mut counts: HashMap<&str, usize> = HashMap::new();
        for v in self.column_values(target)? {
            *counts.entry(v.as_str()).or_default() += 1;
        }
        let mut out: Vec<(String, usize)> =
            counts.into_iter().map(|(k, c)| (k.to_string(), c)).collect();
        out.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        Ok(out)
    }

    /// Raw (unstandardized) values of `features` for the given rows.
    pub fn feature_rows(&self, features: &[String], rows: &[usize]) -> Result<Array2<f64>> {
        let cols = features
            .iter()
            .map(|f| self.numeric_column(f))
            .collect::<Result<Vec<_>>>()?;
        let mut out = Array2::zeros((rows.len(), cols.len()));
        for (i, &r) in rows.iter().enumerate() {
            for (j, c) in cols.iter().enumerate() {
                out[[i, j]] = c[r];
            }
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClassStatus {
    Excluded,
    Known,
    Unknown,
}

/// The expert's feature and class choices for one dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionState {
    #[serde(default)]
    pub dataset_id: String,
    /// Input features in model column order.
    pub selected_features: Vec<String>,
    pub target_column: String,
    pub class_status: BTreeMap<String, ClassStatus>,
}

impl SelectionState {
    /// Checks the selection against `dataset` without materializing rows.
    pub fn validate(&self, dataset: &Dataset) -> Result<()> {
        dataset.column(&self.target_column)?;
        if self.selected_features.is_empty() {
            return Err(Error::InvalidPartition("no feature selected".into()));
        }
        let mut seen = HashSet::new();
        for f in &self.selected_features {
            let j = dataset.column(f)?;
            if f == &self.target_column {
                return Err(Error::InvalidPartition(format!(
                    "target column {f:?} cannot also be a feature"
                )));
            }
            if dataset.schema.columns[j].kind != ColumnKind::Numeric {
                return Err(Error::InvalidPartition(format!(
                    "feature {f:?} is categorical"
                )));
            }
            if !seen.insert(f) {
                return Err(Error::InvalidPartition(format!("feature {f:?} selected twice")));
            }
        }
        let values: HashSet<&str> = dataset
            .column_values(&self.target_column)?
            .iter()
            .map(String::as_str)
            .collect();
        let covered: HashSet<&str> = self.class_status.keys().map(String::as_str).collect();
        if values != covered {
            return Err(Error::InvalidPartition(
                "class_status must cover exactly the values of the target column".into(),
            ));
        }
        let has = |s| self.class_status.values().any(|&v| v == s);
        if !has(ClassStatus::Known) {
            return Err(Error::InvalidPartition("no known class".into()));
        }
        if !has(ClassStatus::Unknown) {
            return Err(Error::InvalidPartition("no unknown class".into()));
        }
        Ok(())
    }

    pub fn status_of(&self, class: &str) -> ClassStatus {
        self.class_status
            .get(class)
            .copied()
            .unwrap_or(ClassStatus::Excluded)
    }

    fn classes_with(&self, status: ClassStatus) -> Vec<String> {
        self.class_status
            .iter()
            .filter(|(_, &s)| s == status)
            .map(|(k, _)| k.clone())
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FeatureScale {
    pub mean: f64,
    pub std: f64,
}

impl FeatureScale {
    pub fn apply(&self, v: f64) -> f64 {
        if self.std > 0.0 {
            (v - self.mean) / self.std
        } else {
            0.0
        }
    }
}

/// Standardized training matrices for one selection.
#[derive(Debug, Clone)]
pub struct DataView {
    pub features: Vec<String>,
    pub x_known: Array2<f64>,
    pub y_known: Vec<usize>,
    /// Known class names, indexed by the dense labels in `y_known`.
    pub known_classes: Vec<String>,
    pub x_unknown: Array2<f64>,
    /// Ground-truth class of each unknown row, for evaluation only.
    pub y_unknown: Vec<usize>,
    pub unknown_classes: Vec<String>,
    pub standardization: Vec<FeatureScale>,
    /// Dataset row of each known row, then each unknown row.
    pub row_origin: Vec<usize>,
}

impl DataView {
    pub fn n_known(&self) -> usize {
        self.x_known.nrows()
    }

    pub fn n_unknown(&self) -> usize {
        self.x_unknown.nrows()
    }

    pub fn known_rows(&self) -> &[usize] {
        &self.row_origin[..self.n_known()]
    }

    pub fn unknown_rows(&self) -> &[usize] {
        &self.row_origin[self.n_known()..]
    }

    /// `[x_known; x_unknown]`.
    pub fn x_all(&self) -> Array2<f64> {
        ndarray::concatenate![ndarray::Axis(0), self.x_known, self.x_unknown]
    }
}

/// Builds the standardized known/unknown matrices for `sel`.
///
/// The z-score is fit over every included row (known and unknown together).
pub fn materialize_view(dataset: &Dataset, sel: &SelectionState) -> Result<DataView> {
    sel.validate(dataset)?;
    let targets = dataset.column_values(&sel.target_column)?;
    let known_classes = sel.classes_with(ClassStatus::Known);
    let unknown_classes = sel.classes_with(ClassStatus::Unknown);
    let known_idx: HashMap<&str, usize> = known_classes
        .iter()
        .enumerate()
        .map(|(i, c)| (c.as_str(), i))
        .collect();
    let unknown_idx: HashMap<&str, usize> = unknown_classes
        .iter()
        .enumerate()
        .map(|(i, c)| (c.as_str(), i))
        .collect();

    let mut known_rows = Vec::new();
    let mut y_known = Vec::new();
    let mut unknown_rows = Vec::new();
    let mut y_unknown = Vec::new();
    for (row, t) in targets.iter().enumerate() {
        match sel.status_of(t) {
            ClassStatus::Known => {
                known_rows.push(row);
                y_known.push(known_idx[t.as_str()]);
            }
            ClassStatus::Unknown => {
                unknown_rows.push(row);
                y_unknown.push(unknown_idx[t.as_str()]);
            }
            ClassStatus::Excluded => {}
        }
    }

    let mut x_known = dataset.feature_rows(&sel.selected_features, &known_rows)?;
    let mut x_unknown = dataset.feature_rows(&sel.selected_features, &unknown_rows)?;
    let n = (known_rows.len() + unknown_rows.len()) as f64;
    let standardization: Vec<FeatureScale> = (0..sel.selected_features.len())
        .map(|j| {
            let (kc, uc) = (x_known.column(j), x_unknown.column(j));
            let col = || kc.iter().chain(uc.iter()).copied();
            let mean = col().sum::<f64>() / n;
            let var = col().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            // Values within rounding noise of a constant are treated as constant.
            let std = var.sqrt();
            let std = if std <= 1e-12 * mean.abs().max(1.0) { 0.0 } else { std };
            FeatureScale { mean, std }
        })
        .collect();
    for block in [&mut x_known, &mut x_unknown] {
        for mut row in block.rows_mut() {
            for (v, s) in row.iter_mut().zip(&standardization) {
                *v = s.apply(*v);
            }
        }
    }

    let mut row_origin = known_rows;
    row_origin.extend(unknown_rows);
    Ok(DataView {
        features: sel.selected_features.clone(),
        x_known,
        y_known,
        known_classes,
        x_unknown,
        y_unknown,
        unknown_classes,
        standardization,
        row_origin,
    })
}

/// Thread-safe registry of loaded datasets.
#[derive(Debug, Default)]
pub struct DatasetRegistry {
    inner: RwLock<HashMap<String, Arc<Dataset>>>,
}

impl DatasetRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&self, dataset: Dataset) -> Arc<Dataset> {
        let ds = Arc::new(dataset);
        self.inner
            .write()
            .expect("registry lock poisoned")
            .insert(ds.id.clone(), ds.clone());
        ds
    }

    pub fn get(&self, id: &str) -> Result<Arc<Dataset>> {
        self.inner
            .read()
            .expect("registry lock poisoned")
            .get(id)
            .cloned()
            .ok_or_else(|| Error::UnknownDataset(id.to_string()))
    }

    pub fn len(&self) -> usize {
        self.inner.read().expect("registry lock poisoned").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}
