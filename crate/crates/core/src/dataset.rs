//! Flow-table ingestion: dataset specs, CSV loading with sanitization,
//! multi-dataset fusion, and the train/eval split.
//!
//! Tables are stored column-major. Categorical features are text columns,
//! numerical features are `f64` columns sanitized at the door (missing → 0,
//! negative → 0, anything else non-finite is refused), and the label column
//! is mapped to its binary form while the dataset spec — the only place that
//! knows the benign label value — is still at hand.

use std::collections::BTreeSet;
use std::fmt;
use std::path::Path;

use rand::seq::SliceRandom;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("cannot parse dataset spec {path}: {source}")]
    SpecParse {
        path: String,
        #[source]
        source: serde_json::Error,
    },

    #[error("field {field:?} appears in more than one field list")]
    OverlappingField { field: String },

    #[error("label column {label:?} is also listed as a feature field")]
    LabelIsFeature { label: String },

    #[error("dataset spec declares no categorical or numerical features")]
    NoFeatures,

    #[error("dataset spec has an empty {what}")]
    EmptyName { what: &'static str },

    #[error("CSV header is missing declared column {column:?}")]
    HeaderMissingColumn { column: String },

    #[error("CSV read failed: {0}")]
    Csv(#[from] csv::Error),

    #[error("data row {row}, column {column:?}: {value:?} is not a finite number")]
    BadNumericCell {
        row: usize,
        column: String,
        value: String,
    },

    #[error("tables cannot be fused, column sets differ; unmatched: {difference:?}")]
    SchemaMismatch { difference: Vec<String> },

    #[error("tables cannot be fused, column {column:?} is {left} in one table and {right} in another")]
    ColumnKindMismatch {
        column: String,
        left: &'static str,
        right: &'static str,
    },

    #[error("no tables to fuse")]
    NothingToFuse,

    #[error("operation requires a nonempty table")]
    EmptyTable,

    #[error("train fraction must lie strictly between 0 and 1, got {0}")]
    BadFraction(f64),

    #[error("column lengths disagree: {detail}")]
    RaggedColumns { detail: String },
}

/// Declarative description of one flow dataset's schema.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub name: String,
    pub categorical_fields: Vec<String>,
    pub numerical_fields: Vec<String>,
    pub label_column: String,
    /// Label value that marks legitimate traffic; everything else is attack.
    pub benign_label: String,
    /// Attack-subtype column, carried as metadata only.
    #[serde(default)]
    pub class_column: Option<String>,
    /// Columns present in the CSV that must not become features
    /// (endpoint addresses leak identity across splits, for example).
    #[serde(default)]
    pub dropped_columns: Vec<String>,
}

impl DatasetSpec {
    /// Checks the spec invariants: disjoint field lists, label not a
    /// feature, and at least one feature.
    pub fn validate(&self) -> Result<(), DatasetError> {
        if self.name.is_empty() {
            return Err(DatasetError::EmptyName { what: "name" });
        }
        if self.label_column.is_empty() {
            return Err(DatasetError::EmptyName { what: "label_column" });
        }
        let mut seen = BTreeSet::new();
        for field in self
            .categorical_fields
            .iter()
            .chain(&self.numerical_fields)
            .chain(&self.dropped_columns)
        {
            if !seen.insert(field.as_str()) {
                return Err(DatasetError::OverlappingField { field: field.clone() });
            }
        }
        if self.categorical_fields.contains(&self.label_column)
            || self.numerical_fields.contains(&self.label_column)
        {
            return Err(DatasetError::LabelIsFeature { label: self.label_column.clone() });
        }
        if self.categorical_fields.is_empty() && self.numerical_fields.is_empty() {
            return Err(DatasetError::NoFeatures);
        }
        Ok(())
    }
}

/// Loads and validates a dataset spec from a JSON file.
pub fn load_spec(path: &Path) -> Result<DatasetSpec, DatasetError> {
    let text = std::fs::read_to_string(path).map_err(|source| DatasetError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let spec: DatasetSpec =
        serde_json::from_str(&text).map_err(|source| DatasetError::SpecParse {
            path: path.display().to_string(),
            source,
        })?;
    spec.validate()?;
    Ok(spec)
}

/// Binary ground truth: benign (0) or attack (1).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BinaryLabel {
    Benign,
    Attack,
}

impl BinaryLabel {
    /// Benign iff the raw cell equals the spec's benign label value.
    pub fn from_cell(cell: &str, benign_label: &str) -> Self {
        if cell == benign_label {
            BinaryLabel::Benign
        } else {
            BinaryLabel::Attack
        }
    }

    pub fn as_u8(self) -> u8 {
        match self {
            BinaryLabel::Benign => 0,
            BinaryLabel::Attack => 1,
        }
    }

    pub fn as_f64(self) -> f64 {
        f64::from(self.as_u8())
    }

    pub fn is_attack(self) -> bool {
        matches!(self, BinaryLabel::Attack)
    }
}

impl fmt::Display for BinaryLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            BinaryLabel::Benign => write!(f, "benign"),
            BinaryLabel::Attack => write!(f, "attack"),
        }
    }
}

/// One feature column's values.
#[derive(Debug, Clone, PartialEq)]
pub enum ColumnData {
    Text(Vec<String>),
    Num(Vec<f64>),
}

impl ColumnData {
    pub fn len(&self) -> usize {
        match self {
            ColumnData::Text(v) => v.len(),
            ColumnData::Num(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn kind(&self) -> &'static str {
        match self {
            ColumnData::Text(_) => "text",
            ColumnData::Num(_) => "numeric",
        }
    }
}

/// A sanitized flow table in canonical column order: categorical features,
/// numerical features, then any metadata columns. Labels live alongside the
/// feature columns, already mapped to their binary form; per-row origin
/// records which source dataset a row came from, surviving fusion.
#[derive(Debug, Clone, PartialEq)]
pub struct RawFlowTable {
    columns: Vec<String>,
    data: Vec<ColumnData>,
    labels: Vec<BinaryLabel>,
    origin_names: Vec<String>,
    origin_ids: Vec<u32>,
}

impl RawFlowTable {
    /// Assembles a table from parallel columns; test helpers and generators
    /// use this directly, `ingest_csv` goes through it too.
    pub fn from_columns(
        columns: Vec<(String, ColumnData)>,
        labels: Vec<BinaryLabel>,
        origin: &str,
    ) -> Result<Self, DatasetError> {
        let n = labels.len();
        for (name, data) in &columns {
            if data.len() != n {
                return Err(DatasetError::RaggedColumns {
                    detail: format!("column {name:?} has {} rows, labels have {n}", data.len()),
                });
            }
        }
        let (names, data) = columns.into_iter().unzip();
        Ok(Self {
            columns: names,
            data,
            labels,
            origin_names: vec![origin.to_string()],
            origin_ids: vec![0; n],
        })
    }

    pub fn n_rows(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn columns(&self) -> &[String] {
        &self.columns
    }

    pub fn column(&self, name: &str) -> Option<&ColumnData> {
        self.columns
            .iter()
            .position(|c| c == name)
            .map(|i| &self.data[i])
    }

    pub fn labels(&self) -> &[BinaryLabel] {
        &self.labels
    }

    pub fn origin(&self, row: usize) -> &str {
        &self.origin_names[self.origin_ids[row] as usize]
    }

    /// Builds a new table containing `rows` in the given order.
    fn take_rows(&self, rows: &[usize]) -> RawFlowTable {
        let data = self
            .data
            .iter()
            .map(|col| match col {
                ColumnData::Text(v) => {
                    ColumnData::Text(rows.iter().map(|&r| v[r].clone()).collect())
                }
                ColumnData::Num(v) => ColumnData::Num(rows.iter().map(|&r| v[r]).collect()),
            })
            .collect();
        RawFlowTable {
            columns: self.columns.clone(),
            data,
            labels: rows.iter().map(|&r| self.labels[r]).collect(),
            origin_names: self.origin_names.clone(),
            origin_ids: rows.iter().map(|&r| self.origin_ids[r]).collect(),
        }
    }
}

/// Reads one CSV export under a dataset spec.
///
/// The returned table holds the declared feature columns in spec order
/// (categoricals first), sanitized: empty numerical cells become 0, negative
/// values clamp to 0, empty categorical cells become the `"__missing__"`
/// sentinel. Columns the spec does not mention are ignored, as are
/// `dropped_columns`. Row order is preserved.
pub fn ingest_csv(path: &Path, spec: &DatasetSpec) -> Result<RawFlowTable, DatasetError> {
    spec.validate()?;
    let file = std::fs::File::open(path).map_err(|source| DatasetError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(file);
    let headers = reader.headers()?.clone();
    let find = |name: &str| -> Result<usize, DatasetError> {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| DatasetError::HeaderMissingColumn { column: name.to_string() })
    };
    let cat_idx: Vec<usize> = spec
        .categorical_fields
        .iter()
        .map(|f| find(f))
        .collect::<Result<_, _>>()?;
    let num_idx: Vec<usize> = spec
        .numerical_fields
        .iter()
        .map(|f| find(f))
        .collect::<Result<_, _>>()?;
    let label_idx = find(&spec.label_column)?;
    let class_idx = match &spec.class_column {
        Some(c) => Some(find(c)?),
        None => None,
    };

    let mut cat_cols: Vec<Vec<String>> = vec![Vec::new(); cat_idx.len()];
    let mut num_cols: Vec<Vec<f64>> = vec![Vec::new(); num_idx.len()];
    let mut class_col: Vec<String> = Vec::new();
    let mut labels: Vec<BinaryLabel> = Vec::new();

    for (row_number, record) in reader.records().enumerate() {
        let record = record?;
        let row = row_number + 1;
        for (slot, &ix) in cat_cols.iter_mut().zip(&cat_idx) {
            let cell = record.get(ix).unwrap_or("");
            slot.push(if cell.is_empty() { "__missing__".to_string() } else { cell.to_string() });
        }
        for (slot, (&ix, field)) in num_cols
            .iter_mut()
            .zip(num_idx.iter().zip(&spec.numerical_fields))
        {
            let cell = record.get(ix).unwrap_or("");
            let value = if cell.is_empty() {
                0.0
            } else {
                match cell.trim().parse::<f64>() {
                    Ok(v) if v.is_finite() => v.max(0.0),
                    _ => {
                        return Err(DatasetError::BadNumericCell {
                            row,
                            column: field.clone(),
                            value: cell.to_string(),
                        })
                    }
                }
            };
            slot.push(value);
        }
        labels.push(BinaryLabel::from_cell(
            record.get(label_idx).unwrap_or(""),
            &spec.benign_label,
        ));
        if let Some(ix) = class_idx {
            class_col.push(record.get(ix).unwrap_or("").to_string());
        }
    }

    let mut columns: Vec<(String, ColumnData)> = Vec::new();
    for (field, col) in spec.categorical_fields.iter().zip(cat_cols) {
        columns.push((field.clone(), ColumnData::Text(col)));
    }
    for (field, col) in spec.numerical_fields.iter().zip(num_cols) {
        columns.push((field.clone(), ColumnData::Num(col)));
    }
    if let Some(class) = &spec.class_column {
        columns.push((class.clone(), ColumnData::Text(class_col)));
    }
    RawFlowTable::from_columns(columns, labels, &spec.name)
}

/// Concatenates tables sharing a column set and shuffles the result with a
/// deterministic permutation of `seed`. Row origins survive, so the fused
/// table still knows which source each flow came from.
pub fn fuse(tables: &[RawFlowTable], seed: u64) -> Result<RawFlowTable, DatasetError> {
    let Some(first) = tables.first() else {
        return Err(DatasetError::NothingToFuse);
    };
    // Column sets must match exactly; report the symmetric difference.
    let base: BTreeSet<&str> = first.columns.iter().map(String::as_str).collect();
    for table in &tables[1..] {
        let theirs: BTreeSet<&str> = table.columns.iter().map(String::as_str).collect();
        let difference: Vec<String> = base
            .symmetric_difference(&theirs)
            .map(|s| s.to_string())
            .collect();
        if !difference.is_empty() {
            return Err(DatasetError::SchemaMismatch { difference });
        }
    }

    let mut columns: Vec<(String, ColumnData)> = first
        .columns
        .iter()
        .map(|name| {
            let col = first.column(name).expect("own column");
            let empty = match col {
                ColumnData::Text(_) => ColumnData::Text(Vec::new()),
                ColumnData::Num(_) => ColumnData::Num(Vec::new()),
            };
            (name.clone(), empty)
        })
        .collect();
    let mut labels = Vec::new();
    let mut origin_names: Vec<String> = Vec::new();
    let mut origin_ids: Vec<u32> = Vec::new();

    for table in tables {
        // Remap this table's origin ids into the fused name list.
        let remap: Vec<u32> = table
            .origin_names
            .iter()
            .map(|name| match origin_names.iter().position(|n| n == name) {
                Some(i) => i as u32,
                None => {
                    origin_names.push(name.clone());
                    (origin_names.len() - 1) as u32
                }
            })
            .collect();
        for (name, dst) in columns.iter_mut() {
            let src = table.column(name).expect("checked column set");
            match (dst, src) {
                (ColumnData::Text(d), ColumnData::Text(s)) => d.extend(s.iter().cloned()),
                (ColumnData::Num(d), ColumnData::Num(s)) => d.extend(s.iter().copied()),
                (dst, src) => {
                    return Err(DatasetError::ColumnKindMismatch {
                        column: name.clone(),
                        left: dst.kind(),
                        right: src.kind(),
                    })
                }
            }
        }
        labels.extend(table.labels.iter().copied());
        origin_ids.extend(table.origin_ids.iter().map(|&i| remap[i as usize]));
    }

    let n = labels.len();
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);

    let shuffled = RawFlowTable {
        columns: columns.iter().map(|(n, _)| n.clone()).collect(),
        data: columns.into_iter().map(|(_, d)| d).collect(),
        labels,
        origin_names,
        origin_ids,
    }
    .take_rows(&order);
    Ok(shuffled)
}

/// Deterministic shuffled split: `|train| = floor(train_fraction · N)`,
/// remainder to eval. The two halves partition the input.
pub fn split(
    table: &RawFlowTable,
    train_fraction: f64,
    seed: u64,
) -> Result<(RawFlowTable, RawFlowTable), DatasetError> {
    if table.is_empty() {
        return Err(DatasetError::EmptyTable);
    }
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(DatasetError::BadFraction(train_fraction));
    }
    let n = table.n_rows();
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);
    let n_train = (train_fraction * n as f64).floor() as usize;
    let train = table.take_rows(&order[..n_train]);
    let eval = table.take_rows(&order[n_train..]);
    Ok((train, eval))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn demo_spec() -> DatasetSpec {
        DatasetSpec {
            name: "demo".into(),
            categorical_fields: vec!["PROTOCOL".into(), "L4_DST_PORT".into()],
            numerical_fields: vec!["IN_BYTES".into(), "OUT_BYTES".into()],
            label_column: "Label".into(),
            benign_label: "normal".into(),
            class_column: None,
            dropped_columns: vec!["IPV4_SRC_ADDR".into()],
        }
    }

    fn small_table(n: usize, origin: &str) -> RawFlowTable {
        RawFlowTable::from_columns(
            vec![
                (
                    "PROTOCOL".into(),
                    ColumnData::Text((0..n).map(|i| format!("p{}", i % 3)).collect()),
                ),
                (
                    "IN_BYTES".into(),
                    ColumnData::Num((0..n).map(|i| i as f64).collect()),
                ),
            ],
            (0..n)
                .map(|i| if i % 2 == 0 { BinaryLabel::Benign } else { BinaryLabel::Attack })
                .collect(),
            origin,
        )
        .unwrap()
    }

    #[test]
    fn spec_validation_accepts_the_reference_schema() {
        assert!(demo_spec().validate().is_ok());
    }

    #[test]
    fn spec_validation_rejects_overlapping_fields() {
        let mut spec = demo_spec();
        spec.numerical_fields.push("PROTOCOL".into());
        assert!(matches!(
            spec.validate(),
            Err(DatasetError::OverlappingField { field }) if field == "PROTOCOL"
        ));
    }

    #[test]
    fn spec_validation_rejects_empty_feature_lists() {
        let mut spec = demo_spec();
        spec.categorical_fields.clear();
        spec.numerical_fields.clear();
        assert!(matches!(spec.validate(), Err(DatasetError::NoFeatures)));
    }

    #[test]
    fn spec_validation_rejects_label_listed_as_feature() {
        let mut spec = demo_spec();
        spec.categorical_fields.push("Label".into());
        assert!(matches!(spec.validate(), Err(DatasetError::LabelIsFeature { .. })));
    }

    #[test]
    fn binary_label_maps_benign_value_only() {
        assert_eq!(BinaryLabel::from_cell("normal", "normal"), BinaryLabel::Benign);
        assert_eq!(BinaryLabel::from_cell("ddos", "normal"), BinaryLabel::Attack);
        assert_eq!(BinaryLabel::from_cell("Normal", "normal"), BinaryLabel::Attack);
    }

    #[test]
    fn fuse_concatenates_and_is_deterministic() {
        let a = small_table(3, "a");
        let b = small_table(2, "b");
        let fused1 = fuse(&[a.clone(), b.clone()], 7).unwrap();
        let fused2 = fuse(&[a, b], 7).unwrap();
        assert_eq!(fused1.n_rows(), 5);
        assert_eq!(fused1, fused2);
        // Origin tags survive the shuffle.
        let mut from_b = 0;
        for row in 0..5 {
            if fused1.origin(row) == "b" {
                from_b += 1;
            }
        }
        assert_eq!(from_b, 2);
    }

    #[test]
    fn fuse_rejects_differing_column_sets() {
        let a = small_table(2, "a");
        let b = RawFlowTable::from_columns(
            vec![("OTHER".into(), ColumnData::Num(vec![1.0]))],
            vec![BinaryLabel::Benign],
            "b",
        )
        .unwrap();
        match fuse(&[a, b], 0) {
            Err(DatasetError::SchemaMismatch { difference }) => {
                assert!(difference.contains(&"OTHER".to_string()));
                assert!(difference.contains(&"PROTOCOL".to_string()));
            }
            other => panic!("expected schema mismatch, got {other:?}"),
        }
    }

    #[test]
    fn split_uses_the_floor_rule() {
        let table = small_table(10, "x");
        let (train, eval) = split(&table, 0.8, 3).unwrap();
        assert_eq!(train.n_rows(), 8);
        assert_eq!(eval.n_rows(), 2);

        let single = small_table(1, "x");
        let (train, eval) = split(&single, 0.8, 3).unwrap();
        assert_eq!(train.n_rows(), 0);
        assert_eq!(eval.n_rows(), 1);
    }

    #[test]
    fn split_partitions_the_rows() {
        let table = small_table(20, "x");
        let (train, eval) = split(&table, 0.8, 11).unwrap();
        // IN_BYTES values are unique row ids here; the two halves must
        // partition them exactly.
        let collect = |t: &RawFlowTable| match t.column("IN_BYTES").unwrap() {
            ColumnData::Num(v) => v.clone(),
            _ => unreachable!(),
        };
        let mut all: Vec<f64> = collect(&train).into_iter().chain(collect(&eval)).collect();
        all.sort_by(f64::total_cmp);
        let want: Vec<f64> = (0..20).map(|i| i as f64).collect();
        assert_eq!(all, want);
    }

    #[test]
    fn split_rejects_degenerate_fractions_and_empty_tables() {
        let table = small_table(4, "x");
        assert!(matches!(split(&table, 1.0, 0), Err(DatasetError::BadFraction(_))));
        assert!(matches!(split(&table, 0.0, 0), Err(DatasetError::BadFraction(_))));
        let empty = small_table(0, "x");
        assert!(matches!(split(&empty, 0.8, 0), Err(DatasetError::EmptyTable)));
    }

    #[test]
    fn from_columns_rejects_ragged_input() {
        let result = RawFlowTable::from_columns(
            vec![("A".into(), ColumnData::Num(vec![1.0, 2.0]))],
            vec![BinaryLabel::Benign],
            "x",
        );
        assert!(matches!(result, Err(DatasetError::RaggedColumns { .. })));
    }
}
