//! Forward-graph assembly: the transformer building blocks as standalone
//! tape ops, plus the full window-batch classifier graph they compose into.

use crate::autograd::{AutogradError, ParamVars, Tape, Var};

use super::{HeadKind, InputEncodingKind, Model, ModelError, WindowBatch};

/// Epsilon inside every layer norm.
pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Scaled dot-product attention over a single window:
/// `softmax(Q·Kᵀ/√d_k)·V`, causally masked when asked.
pub fn attention<'t>(
    q: Var<'t>,
    k: Var<'t>,
    v: Var<'t>,
    causal: bool,
) -> Result<Var<'t>, AutogradError> {
    q.attention_windows(k, v, 1, 1, causal)
}

/// The four projection matrices of one attention sublayer.
#[derive(Clone, Copy)]
pub struct AttentionParams<'t> {
    pub wq: Var<'t>,
    pub wk: Var<'t>,
    pub wv: Var<'t>,
    pub wo: Var<'t>,
}

/// Multi-head self-attention over a packed window batch: project to Q/K/V,
/// attend per head within each window, then project the concatenated heads.
pub fn multi_head_attention<'t>(
    x: Var<'t>,
    p: &AttentionParams<'t>,
    heads: usize,
    windows: usize,
    causal: bool,
) -> Result<Var<'t>, AutogradError> {
    let q = x.matmul(p.wq)?;
    let k = x.matmul(p.wk)?;
    let v = x.matmul(p.wv)?;
    q.attention_windows(k, v, windows, heads, causal)?.matmul(p.wo)
}

/// Every parameter of one transformer block.
#[derive(Clone, Copy)]
pub struct BlockParams<'t> {
    pub attn: AttentionParams<'t>,
    pub ln1_gamma: Var<'t>,
    pub ln1_beta: Var<'t>,
    pub ffn_w1: Var<'t>,
    pub ffn_b1: Var<'t>,
    pub ffn_w2: Var<'t>,
    pub ffn_b2: Var<'t>,
    pub ln2_gamma: Var<'t>,
    pub ln2_beta: Var<'t>,
}

impl<'t> BlockParams<'t> {
    /// Picks layer `layer`'s parameters out of a registered set.
    pub fn from_vars(vars: &ParamVars<'t>, layer: usize) -> Self {
        let g = |suffix: &str| vars[&format!("layer{layer:02}.{suffix}")];
        Self {
            attn: AttentionParams {
                wq: g("attn.wq"),
                wk: g("attn.wk"),
                wv: g("attn.wv"),
                wo: g("attn.wo"),
            },
            ln1_gamma: g("ln1.gamma"),
            ln1_beta: g("ln1.beta"),
            ffn_w1: g("ffn.w1"),
            ffn_b1: g("ffn.b1"),
            ffn_w2: g("ffn.w2"),
            ffn_b2: g("ffn.b2"),
            ln2_gamma: g("ln2.gamma"),
            ln2_beta: g("ln2.beta"),
        }
    }
}

/// One post-norm transformer block over a packed window batch:
/// `Y = LN(X + MHA(X))`, `Z = LN(Y + FFN(Y))` with
/// `FFN(y) = max(0, y·W₁ + b₁)·W₂ + b₂`.
pub fn block_forward<'t>(
    x: Var<'t>,
    p: &BlockParams<'t>,
    heads: usize,
    windows: usize,
    causal: bool,
) -> Result<Var<'t>, AutogradError> {
    let attn = multi_head_attention(x, &p.attn, heads, windows, causal)?;
    let y = x.add(attn)?.layer_norm(p.ln1_gamma, p.ln1_beta, LAYER_NORM_EPS)?;
    let ffn = y
        .matmul(p.ffn_w1)?
        .add_row_vec(p.ffn_b1)?
        .relu()?
        .matmul(p.ffn_w2)?
        .add_row_vec(p.ffn_b2)?;
    y.add(ffn)?.layer_norm(p.ln2_gamma, p.ln2_beta, LAYER_NORM_EPS)
}

/// Head parameters: optional time weights (featurewise heads only) plus the
/// classification MLP.
#[derive(Clone, Copy)]
pub struct HeadParams<'t> {
    pub time_weights: Option<Var<'t>>,
    pub w1: Var<'t>,
    pub b1: Var<'t>,
    pub w2: Var<'t>,
    pub b2: Var<'t>,
}

impl<'t> HeadParams<'t> {
    pub fn from_vars(vars: &ParamVars<'t>, kind: HeadKind) -> Self {
        let time_weights = match kind {
            HeadKind::FeaturewiseProjection => Some(vars["head.time_proj"]),
            HeadKind::FeaturewiseEmbedding => Some(vars["head.time_embed"]),
            _ => None,
        };
        Self {
            time_weights,
            w1: vars["out.w1"],
            b1: vars["out.b1"],
            w2: vars["out.w2"],
            b2: vars["out.b2"],
        }
    }
}

/// Pools the block stack's output sequence `S` (packed `windows × rows`)
/// into one classification vector per window.
pub fn head_vector<'t>(
    s: Var<'t>,
    kind: HeadKind,
    time_weights: Option<Var<'t>>,
    windows: usize,
) -> Result<Var<'t>, ModelError> {
    let shape = s.shape();
    let rows = shape[0] / windows;
    let d = shape[1];
    let v = match kind {
        // The CLS row sits at the end of its window, so both heads read the
        // final row; they differ in what that row is.
        HeadKind::LastToken | HeadKind::ClsToken => {
            let last: Vec<usize> = (0..windows).map(|w| w * rows + rows - 1).collect();
            s.select_rows(&last)?
        }
        HeadKind::Flatten => s.reshape(&[windows, rows * d])?,
        HeadKind::GlobalAvgPool => s.window_mean_rows(windows)?,
        HeadKind::FeaturewiseProjection | HeadKind::FeaturewiseEmbedding => {
            let w = time_weights.ok_or_else(|| ModelError::BadConfig {
                reason: "featurewise heads need time weights".into(),
            })?;
            s.window_weighted_rows(w, windows)?
        }
    };
    Ok(v)
}

/// Full classification head: pooled vector through the one-hidden-layer MLP
/// to a single logit per window.
pub fn classify_head<'t>(
    s: Var<'t>,
    kind: HeadKind,
    p: &HeadParams<'t>,
    windows: usize,
) -> Result<Var<'t>, ModelError> {
    let v = head_vector(s, kind, p.time_weights, windows)?;
    let logit = v
        .matmul(p.w1)?
        .add_row_vec(p.b1)?
        .relu()?
        .matmul(p.w2)?
        .add_row_vec(p.b2)?;
    Ok(logit)
}

/// Applies the model's input encoding to a packed batch:
/// `(windows·T) × width → (windows·T) × d_model`.
pub(super) fn encode_windows<'t>(
    tape: &'t Tape,
    vars: &ParamVars<'t>,
    model: &Model,
    batch: &WindowBatch,
) -> Result<Var<'t>, ModelError> {
    let layout = model.layout();
    let config = model.config();
    if batch.width != layout.feature_width {
        return Err(ModelError::WidthMismatch {
            expected: layout.feature_width,
            got: batch.width,
        });
    }
    if batch.window_len != config.window {
        return Err(ModelError::WindowMismatch {
            expected: config.window,
            got: batch.window_len,
        });
    }
    let x = tape.leaf(batch.features.clone())?;
    let encoded = match config.input_encoding {
        InputEncodingKind::None => x.pad_cols(config.d_model - batch.width)?,
        InputEncodingKind::RecordProjection => {
            x.matmul(vars["enc.proj.w"])?.add_row_vec(vars["enc.proj.b"])?
        }
        InputEncodingKind::RecordEmbedDense => x
            .matmul(vars["enc.dense.w1"])?
            .add_row_vec(vars["enc.dense.b1"])?
            .relu()?
            .matmul(vars["enc.dense.w2"])?
            .add_row_vec(vars["enc.dense.b2"])?,
        InputEncodingKind::CategoricalEmbedLookup => {
            let cards = &layout.categorical_cardinalities;
            let mut parts = Vec::with_capacity(cards.len() + 1);
            for (f, &card) in cards.iter().enumerate() {
                let indices = lookup_indices(batch, f, card)?;
                parts.push(vars[&format!("enc.lookup.emb{f:02}")].embedding_lookup(&indices)?);
            }
            if batch.width > cards.len() {
                parts.push(x.slice_cols(cards.len(), batch.width - cards.len())?);
            }
            tape.concat_cols(&parts)?
                .matmul(vars["enc.lookup.w"])?
                .add_row_vec(vars["enc.lookup.b"])?
        }
    };
    Ok(encoded)
}

/// Reads column `field` of every packed row as an embedding index,
/// rejecting non-integral values and codes outside the table.
fn lookup_indices(
    batch: &WindowBatch,
    field: usize,
    cardinality: usize,
) -> Result<Vec<usize>, ModelError> {
    let width = batch.width;
    let rows = batch.windows * batch.window_len;
    let mut indices = Vec::with_capacity(rows);
    for r in 0..rows {
        let value = batch.features.data()[r * width + field];
        let bad = |value| ModelError::LookupIndex { field, value, cardinality };
        if value.fract() != 0.0 || value < 0.0 {
            return Err(bad(value));
        }
        let ix = value as usize;
        if ix >= cardinality {
            return Err(bad(value));
        }
        indices.push(ix);
    }
    Ok(indices)
}

/// Everything up to the class head: encode, append the CLS row when
/// configured, add positional rows, run the block stack. Returns the hidden
/// rows as a `(windows · seq_len) × d_model` node.
pub(crate) fn model_hidden<'t>(
    tape: &'t Tape,
    vars: &ParamVars<'t>,
    model: &Model,
    batch: &WindowBatch,
) -> Result<Var<'t>, ModelError> {
    let config = model.config();
    let mut h = encode_windows(tape, vars, model, batch)?;
    if config.head == HeadKind::ClsToken {
        h = h.append_row_per_window(vars["cls"], batch.windows)?;
    }
    h = h.tile_add_rows(vars["pos"], batch.windows)?;
    let causal = config.causal();
    for layer in 0..config.layers {
        let p = BlockParams::from_vars(vars, layer);
        h = block_forward(h, &p, config.heads, batch.windows, causal)?;
    }
    Ok(h)
}

/// The full forward graph: hidden rows pooled by the class head, classified,
/// squashed. Returns one probability per window as a `windows × 1` node.
pub(crate) fn model_probabilities<'t>(
    tape: &'t Tape,
    vars: &ParamVars<'t>,
    model: &Model,
    batch: &WindowBatch,
) -> Result<Var<'t>, ModelError> {
    let config = model.config();
    let h = model_hidden(tape, vars, model, batch)?;
    let head = HeadParams::from_vars(vars, config.head);
    let logit = classify_head(h, config.head, &head, batch.windows)?;
    Ok(logit.sigmoid()?)
}

/// Forward graph plus the mean BCE loss against the batch labels.
pub(crate) fn model_loss<'t>(
    tape: &'t Tape,
    vars: &ParamVars<'t>,
    model: &Model,
    batch: &WindowBatch,
) -> Result<(Var<'t>, Var<'t>), ModelError> {
    let probs = model_probabilities(tape, vars, model, batch)?;
    let loss = probs.bce_mean(&batch.labels)?;
    Ok((loss, probs))
}
