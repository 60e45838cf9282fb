//! Train-only feature encoding and the sliding-window view.
//!
//! Categorical fields keep their top-N training categories (plus one shared
//! "other" slot for everything unseen); numericals go through `log1p` and
//! min-max scaling against training extrema, clamped to `[0, 1]` at
//! evaluation time. Everything here is fitted on the training split alone —
//! leaking evaluation extrema into the scaler quietly inflates results, and
//! the pipeline tests check for exactly that.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::dataset::{BinaryLabel, ColumnData, DatasetSpec, RawFlowTable};

/// Bumped when the serialized state layout changes shape.
pub const STATE_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum PreprocessError {
    #[error("cannot fit on an empty training table")]
    EmptyTrain,

    #[error("n_top must be at least 1, got {0}")]
    BadTopN(usize),

    #[error("table is missing column {column:?} required by the fitted state")]
    MissingColumn { column: String },

    #[error("column {column:?} is {found} but the fitted state expects {expected}")]
    ColumnKind {
        column: String,
        expected: &'static str,
        found: &'static str,
    },

    #[error("transform produced a non-finite value in column {column:?} (internal invariant)")]
    NonFinite { column: String },

    #[error("window length must be at least 1")]
    BadWindowLength,

    #[error("preprocessor state serialization failed: {0}")]
    Serialize(#[from] serde_json::Error),

    #[error("unsupported preprocessor state version {found} (this build reads {expected})")]
    VersionMismatch { found: u32, expected: u32 },
}

/// How categorical fields become numbers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncodingMode {
    /// One indicator column per retained category plus an "other" column.
    OneHot,
    /// A single integer code per field; feeds embedding-lookup models.
    Integer,
}

/// Fitted vocabulary for one categorical field.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CategoricalFieldState {
    pub field: String,
    /// Descending training frequency, ties broken lexicographically.
    pub top_categories: Vec<String>,
    /// Code for unseen/overflow categories; always `top_categories.len()`.
    pub other_index: usize,
}

impl CategoricalFieldState {
    /// Slot count for this field: retained categories plus "other".
    pub fn cardinality(&self) -> usize {
        self.top_categories.len() + 1
    }

    fn code_of(&self, value: &str) -> usize {
        self.top_categories
            .iter()
            .position(|c| c == value)
            .unwrap_or(self.other_index)
    }
}

/// Fitted scaling extrema for one numerical field, in log space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NumericalFieldState {
    pub field: String,
    pub min_log: f64,
    pub max_log: f64,
}

/// Everything `transform` needs, fitted once on the training split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreprocessorState {
    pub version: u32,
    pub mode: EncodingMode,
    pub n_top: usize,
    pub categorical: Vec<CategoricalFieldState>,
    pub numerical: Vec<NumericalFieldState>,
    pub feature_width: usize,
}

impl PreprocessorState {
    pub fn feature_width(&self) -> usize {
        self.feature_width
    }

    /// Per-field slot counts (`|top| + 1`), in field order.
    pub fn categorical_cardinalities(&self) -> Vec<usize> {
        self.categorical.iter().map(CategoricalFieldState::cardinality).collect()
    }

    pub fn is_integer_mode(&self) -> bool {
        self.mode == EncodingMode::Integer
    }

    /// Canonical JSON serialization (versioned).
    pub fn to_json(&self) -> Result<String, PreprocessError> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self, PreprocessError> {
        let state: PreprocessorState = serde_json::from_str(text)?;
        if state.version != STATE_FORMAT_VERSION {
            return Err(PreprocessError::VersionMismatch {
                found: state.version,
                expected: STATE_FORMAT_VERSION,
            });
        }
        Ok(state)
    }

    /// SHA-256 of the canonical JSON, used to bind checkpoints to the exact
    /// preprocessing that produced their training data.
    pub fn content_hash(&self) -> Result<String, PreprocessError> {
        let bytes = serde_json::to_vec(self)?;
        Ok(hex::encode(Sha256::digest(&bytes)))
    }
}

/// Encoded flows: `n_rows × width` features (row-major) plus per-row labels.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedTable {
    pub width: usize,
    pub features: Vec<f64>,
    pub labels: Vec<BinaryLabel>,
}

impl EncodedTable {
    pub fn n_rows(&self) -> usize {
        self.labels.len()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.width..(i + 1) * self.width]
    }
}

/// One classification example: `window × width` features, oldest flow first,
/// labelled by its final flow.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedWindow {
    pub window: usize,
    pub width: usize,
    /// `window · width` values, row-major; leading `pad_count` rows are zero.
    pub features: Vec<f64>,
    pub label: BinaryLabel,
    pub pad_count: usize,
}

impl EncodedWindow {
    pub fn row(&self, t: usize) -> &[f64] {
        &self.features[t * self.width..(t + 1) * self.width]
    }
}

/// Fits encoders on the training table only.
pub fn fit(
    train: &RawFlowTable,
    spec: &DatasetSpec,
    n_top: usize,
    mode: EncodingMode,
) -> Result<PreprocessorState, PreprocessError> {
    if train.is_empty() {
        return Err(PreprocessError::EmptyTrain);
    }
    if n_top < 1 {
        return Err(PreprocessError::BadTopN(n_top));
    }
    let mut categorical = Vec::with_capacity(spec.categorical_fields.len());
    for field in &spec.categorical_fields {
        let values = text_column(train, field)?;
        let mut counts: HashMap<&str, u64> = HashMap::new();
        for v in values {
            *counts.entry(v.as_str()).or_insert(0) += 1;
        }
        let mut ranked: Vec<(&str, u64)> = counts.into_iter().collect();
        // Descending count; lexicographic on ties so the fit is a pure
        // function of the data, not of hash iteration order.
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
        let top_categories: Vec<String> =
            ranked.iter().take(n_top).map(|(c, _)| c.to_string()).collect();
        let other_index = top_categories.len();
        categorical.push(CategoricalFieldState { field: field.clone(), top_categories, other_index });
    }

    let mut numerical = Vec::with_capacity(spec.numerical_fields.len());
    for field in &spec.numerical_fields {
        let values = num_column(train, field)?;
        let mut min_log = f64::INFINITY;
        let mut max_log = f64::NEG_INFINITY;
        for &v in values {
            let l = v.ln_1p();
            min_log = min_log.min(l);
            max_log = max_log.max(l);
        }
        numerical.push(NumericalFieldState { field: field.clone(), min_log, max_log });
    }

    let feature_width = match mode {
        EncodingMode::OneHot => {
            categorical.iter().map(CategoricalFieldState::cardinality).sum::<usize>()
                + numerical.len()
        }
        EncodingMode::Integer => categorical.len() + numerical.len(),
    };
    Ok(PreprocessorState {
        version: STATE_FORMAT_VERSION,
        mode,
        n_top,
        categorical,
        numerical,
        feature_width,
    })
}

/// A single categorical value under a fitted field state.
#[derive(Debug, Clone, PartialEq)]
pub enum EncodedCategorical {
    /// Indicator vector of length `|top| + 1` with exactly one 1.
    OneHot(Vec<f64>),
    /// Code in `[0, |top|]`; `|top|` is the "other" slot.
    Integer(usize),
}

/// Encodes one categorical value. Total: unseen values land in the "other"
/// slot rather than failing.
pub fn encode_categorical(
    value: &str,
    field_state: &CategoricalFieldState,
    mode: EncodingMode,
) -> EncodedCategorical {
    let code = field_state.code_of(value);
    match mode {
        EncodingMode::Integer => EncodedCategorical::Integer(code),
        EncodingMode::OneHot => {
            let mut slots = vec![0.0; field_state.cardinality()];
            slots[code] = 1.0;
            EncodedCategorical::OneHot(slots)
        }
    }
}

/// Scales one raw numerical value into `[0, 1]` under fitted extrema.
fn scale_numerical(value: f64, state: &NumericalFieldState) -> f64 {
    if state.max_log == state.min_log {
        return 0.5;
    }
    let scaled = (value.ln_1p() - state.min_log) / (state.max_log - state.min_log);
    scaled.clamp(0.0, 1.0)
}

/// Encodes a whole table under a fitted state. Output row `i` corresponds to
/// input row `i`; labels ride along unchanged.
pub fn transform(
    table: &RawFlowTable,
    state: &PreprocessorState,
) -> Result<EncodedTable, PreprocessError> {
    let n = table.n_rows();
    let width = state.feature_width;
    let mut features = vec![0.0; n * width];

    let mut offset = 0;
    for cat in &state.categorical {
        let values = text_column(table, &cat.field)?;
        match state.mode {
            EncodingMode::OneHot => {
                let slots = cat.cardinality();
                for (i, v) in values.iter().enumerate() {
                    features[i * width + offset + cat.code_of(v)] = 1.0;
                }
                offset += slots;
            }
            EncodingMode::Integer => {
                for (i, v) in values.iter().enumerate() {
                    features[i * width + offset] = cat.code_of(v) as f64;
                }
                offset += 1;
            }
        }
    }
    for num in &state.numerical {
        let values = num_column(table, &num.field)?;
        for (i, &v) in values.iter().enumerate() {
            let scaled = scale_numerical(v, num);
            if !scaled.is_finite() {
                return Err(PreprocessError::NonFinite { column: num.field.clone() });
            }
            features[i * width + offset] = scaled;
        }
        offset += 1;
    }
    debug_assert_eq!(offset, width);

    Ok(EncodedTable { width, features, labels: table.labels().to_vec() })
}

/// Builds one window per flow: flows `[i−T+1 … i]` with zero-rows padded on
/// the left while the stream is shorter than `T`. Window `i` carries flow
/// `i`'s label, so window count equals flow count.
pub fn make_windows(
    encoded: &EncodedTable,
    window: usize,
) -> Result<Vec<EncodedWindow>, PreprocessError> {
    if window < 1 {
        return Err(PreprocessError::BadWindowLength);
    }
    let width = encoded.width;
    let n = encoded.n_rows();
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let pad_count = (window - 1).saturating_sub(i);
        let mut features = vec![0.0; window * width];
        for t in pad_count..window {
            let src = i + 1 + t - window;
            features[t * width..(t + 1) * width].copy_from_slice(encoded.row(src));
        }
        out.push(EncodedWindow {
            window,
            width,
            features,
            label: encoded.labels[i],
            pad_count,
        });
    }
    Ok(out)
}

fn text_column<'a>(
    table: &'a RawFlowTable,
    field: &str,
) -> Result<&'a Vec<String>, PreprocessError> {
    match table.column(field) {
        Some(ColumnData::Text(v)) => Ok(v),
        Some(other) => Err(PreprocessError::ColumnKind {
            column: field.to_string(),
            expected: "text",
            found: if matches!(other, ColumnData::Num(_)) { "numeric" } else { "text" },
        }),
        None => Err(PreprocessError::MissingColumn { column: field.to_string() }),
    }
}

fn num_column<'a>(table: &'a RawFlowTable, field: &str) -> Result<&'a Vec<f64>, PreprocessError> {
    match table.column(field) {
        Some(ColumnData::Num(v)) => Ok(v),
        Some(_) => Err(PreprocessError::ColumnKind {
            column: field.to_string(),
            expected: "numeric",
            found: "text",
        }),
        None => Err(PreprocessError::MissingColumn { column: field.to_string() }),
    }
}
