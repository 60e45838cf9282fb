//! The configurable sequence classifier: interchangeable input encodings,
//! a stack of encoder or decoder transformer blocks, and interchangeable
//! classification heads feeding a small MLP and a sigmoid.
//!
//! A [`Model`] owns its [`ParameterSet`]; the forward pass is assembled as a
//! tape graph over a packed batch of windows (see [`WindowBatch`]), so the
//! same code path serves inference, training, and gradient checking.

mod checkpoint;
mod graph;
mod lstm;

pub use checkpoint::{load_checkpoint, save_checkpoint, LoadedCheckpoint, CHECKPOINT_VERSION};
pub use graph::{
    attention, block_forward, classify_head, head_vector, multi_head_attention, AttentionParams,
    BlockParams, HeadParams,
};
pub use lstm::LstmBaseline;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autograd::{grad_check, AutogradError, GradCheckReport, ParameterSet, Tape, Tensor};
use crate::preprocess::{EncodedWindow, PreprocessorState};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {reason}")]
    BadConfig { reason: String },

    #[error("window width {got} does not match the model's feature width {expected}")]
    WidthMismatch { expected: usize, got: usize },

    #[error("window length {got} does not match the model's window {expected}")]
    WindowMismatch { expected: usize, got: usize },

    #[error(
        "categorical field {field} holds {value} which is not a valid \
         embedding index (cardinality {cardinality})"
    )]
    LookupIndex {
        field: usize,
        value: f64,
        cardinality: usize,
    },

    #[error("batch must contain at least one window")]
    EmptyBatch,

    #[error(transparent)]
    Autograd(#[from] AutogradError),

    #[error("checkpoint: bad magic, not a model checkpoint")]
    CheckpointMagic,

    #[error("checkpoint: unsupported version {found} (this build reads {expected})")]
    CheckpointVersion { found: u32, expected: u32 },

    #[error("checkpoint: payload truncated while reading {what}")]
    CheckpointTruncated { what: &'static str },

    #[error("checkpoint: malformed header: {0}")]
    CheckpointHeader(#[from] serde_json::Error),

    #[error("checkpoint io: {0}")]
    CheckpointIo(#[from] std::io::Error),

    #[error("checkpoint: parameter mismatch: {detail}")]
    CheckpointParams { detail: String },
}

/// Transformer block flavour. Decoders mask attention causally; with a
/// single input sequence there is no encoder output to cross-attend to, so
/// a decoder block is masked self-attention plus the FFN.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlockType {
    Encoder,
    Decoder,
}

impl std::fmt::Display for BlockType {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            BlockType::Encoder => "encoder",
            BlockType::Decoder => "decoder",
        })
    }
}

/// How raw flow vectors become d_model-wide rows.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InputEncodingKind {
    /// Zero-pad each flow vector up to d_model (requires width ≤ d_model).
    None,
    /// One linear map.
    RecordProjection,
    /// linear → ReLU → linear, hidden width = d_model.
    RecordEmbedDense,
    /// Per-field embedding of integer-coded categoricals, concatenated with
    /// the numerical scalars, then a linear map to d_model.
    CategoricalEmbedLookup,
}

impl std::fmt::Display for InputEncodingKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            InputEncodingKind::None => "none",
            InputEncodingKind::RecordProjection => "record_projection",
            InputEncodingKind::RecordEmbedDense => "record_embed_dense",
            InputEncodingKind::CategoricalEmbedLookup => "categorical_embed_lookup",
        })
    }
}

/// How the block stack's output sequence becomes one classification vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadKind {
    /// The final row of the sequence.
    LastToken,
    /// All rows concatenated; grows the classifier MLP with T·d_model.
    Flatten,
    /// Mean over rows.
    GlobalAvgPool,
    /// vᵈ = Σₜ W[t,d]·S[t,d] with a learnable weight per (time, feature).
    FeaturewiseEmbedding,
    /// vᵈ = Σₜ wₜ·S[t,d] with learnable time weights shared across features.
    FeaturewiseProjection,
    /// A learnable row appended after the end of the sequence; its final
    /// representation is the classification vector.
    ClsToken,
}

impl std::fmt::Display for HeadKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            HeadKind::LastToken => "last_token",
            HeadKind::Flatten => "flatten",
            HeadKind::GlobalAvgPool => "global_avg_pool",
            HeadKind::FeaturewiseEmbedding => "featurewise_embedding",
            HeadKind::FeaturewiseProjection => "featurewise_projection",
            HeadKind::ClsToken => "cls_token",
        })
    }
}

/// Architecture hyperparameters. Everything that decides parameter shapes
/// lives here (plus the feature layout), so a config + seed rebuilds a
/// bit-identical model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub block_type: BlockType,
    pub layers: usize,
    pub heads: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub input_encoding: InputEncodingKind,
    pub head: HeadKind,
    /// Window length T the model consumes.
    pub window: usize,
    /// Embedding width per categorical field (lookup encoding only).
    #[serde(default = "default_embed_dim")]
    pub embed_dim: usize,
    /// Hidden width of the classification MLP.
    #[serde(default = "default_mlp_hidden")]
    pub mlp_hidden: usize,
    pub seed: u64,
}

fn default_embed_dim() -> usize {
    8
}

fn default_mlp_hidden() -> usize {
    64
}

/// What the model needs to know about the fitted preprocessor.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureLayout {
    pub feature_width: usize,
    /// Per-field slot counts for integer-coded categoricals, field order.
    pub categorical_cardinalities: Vec<usize>,
    /// Whether categoricals are integer codes (lookup encoding needs this).
    pub integer_mode: bool,
}

impl FeatureLayout {
    pub fn from_state(state: &PreprocessorState) -> Self {
        Self {
            feature_width: state.feature_width(),
            categorical_cardinalities: state.categorical_cardinalities(),
            integer_mode: state.is_integer_mode(),
        }
    }

    /// Count of trailing numerical columns in integer mode.
    fn numerical_width(&self) -> usize {
        self.feature_width - self.categorical_cardinalities.len()
    }
}

impl ModelConfig {
    /// Checks the config against its own invariants and the feature layout.
    /// Grid search uses the error strings verbatim as skip reasons.
    pub fn validate(&self, layout: &FeatureLayout) -> Result<(), ModelError> {
        let fail = |reason: String| Err(ModelError::BadConfig { reason });
        if self.layers < 1 {
            return fail("layers must be at least 1".into());
        }
        if self.window < 1 {
            return fail("window must be at least 1".into());
        }
        if self.heads < 1 || self.d_model % self.heads != 0 {
            return fail(format!(
                "d_model {} is not divisible by heads {}",
                self.d_model, self.heads
            ));
        }
        if self.d_ff < 1 || self.mlp_hidden < 1 {
            return fail("d_ff and mlp_hidden must be at least 1".into());
        }
        match self.input_encoding {
            InputEncodingKind::None => {
                if layout.feature_width > self.d_model {
                    return fail(format!(
                        "none encoding requires feature_width ≤ d_model ({} > {})",
                        layout.feature_width, self.d_model
                    ));
                }
            }
            InputEncodingKind::CategoricalEmbedLookup => {
                if !layout.integer_mode {
                    return fail(
                        "categorical_embed_lookup requires integer-encoded categoricals".into(),
                    );
                }
                if layout.categorical_cardinalities.is_empty() {
                    return fail("categorical_embed_lookup requires categorical fields".into());
                }
                if self.embed_dim < 1 {
                    return fail("embed_dim must be at least 1".into());
                }
            }
            _ => {}
        }
        Ok(())
    }

    /// Sequence length the block stack sees: the window, plus the appended
    /// slot when a CLS token is in play.
    pub fn seq_len(&self) -> usize {
        self.window + usize::from(self.head == HeadKind::ClsToken)
    }

    fn causal(&self) -> bool {
        self.block_type == BlockType::Decoder
    }
}

/// A built classifier: config, feature layout, and named parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    config: ModelConfig,
    layout: FeatureLayout,
    params: ParameterSet,
}

/// A batch of equal-shape windows packed `(windows·T) × width`, window rows
/// consecutive, oldest flow first.
#[derive(Debug, Clone)]
pub struct WindowBatch {
    pub windows: usize,
    pub window_len: usize,
    pub width: usize,
    pub features: Tensor,
    pub labels: Vec<f64>,
}

impl WindowBatch {
    pub fn from_refs(items: &[&EncodedWindow]) -> Result<Self, ModelError> {
        let Some(first) = items.first() else {
            return Err(ModelError::EmptyBatch);
        };
        let (t, w) = (first.window, first.width);
        let mut features = Vec::with_capacity(items.len() * t * w);
        let mut labels = Vec::with_capacity(items.len());
        for item in items {
            if item.width != w {
                return Err(ModelError::WidthMismatch { expected: w, got: item.width });
            }
            if item.window != t {
                return Err(ModelError::WindowMismatch { expected: t, got: item.window });
            }
            features.extend_from_slice(&item.features);
            labels.push(item.label.as_f64());
        }
        Ok(Self {
            windows: items.len(),
            window_len: t,
            width: w,
            features: Tensor::matrix(items.len() * t, w, features)
                .expect("consistent window dimensions"),
            labels,
        })
    }

    pub fn from_slice(items: &[EncodedWindow]) -> Result<Self, ModelError> {
        let refs: Vec<&EncodedWindow> = items.iter().collect();
        Self::from_refs(&refs)
    }
}

impl Model {
    /// Allocates and initializes parameters for `config` against a feature
    /// layout: Glorot-uniform weights (±√(6/(fan_in+fan_out))), zero biases,
    /// unit layer-norm gains, N(0, 0.02) positional and CLS rows. The draw
    /// order is fixed, so one seed yields bit-identical parameters.
    pub fn build(config: ModelConfig, layout: FeatureLayout) -> Result<Self, ModelError> {
        config.validate(&layout)?;
        assert!(config.layers < 100, "two-digit layer names");
        assert!(layout.categorical_cardinalities.len() < 100, "two-digit field names");
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut params = ParameterSet::new();
        let d = config.d_model;
        let width = layout.feature_width;

        match config.input_encoding {
            InputEncodingKind::None => {}
            InputEncodingKind::RecordProjection => {
                params.insert("enc.proj.w", glorot(&mut rng, width, d));
                params.insert("enc.proj.b", Tensor::zeros(vec![d]));
            }
            InputEncodingKind::RecordEmbedDense => {
                params.insert("enc.dense.w1", glorot(&mut rng, width, d));
                params.insert("enc.dense.b1", Tensor::zeros(vec![d]));
                params.insert("enc.dense.w2", glorot(&mut rng, d, d));
                params.insert("enc.dense.b2", Tensor::zeros(vec![d]));
            }
            InputEncodingKind::CategoricalEmbedLookup => {
                for (f, &card) in layout.categorical_cardinalities.iter().enumerate() {
                    params.insert(&format!("enc.lookup.emb{f:02}"), glorot(&mut rng, card, config.embed_dim));
                }
                let concat = layout.categorical_cardinalities.len() * config.embed_dim
                    + layout.numerical_width();
                params.insert("enc.lookup.w", glorot(&mut rng, concat, d));
                params.insert("enc.lookup.b", Tensor::zeros(vec![d]));
            }
        }

        params.insert("pos", normal_init(&mut rng, vec![config.seq_len(), d], 0.02));
        if config.head == HeadKind::ClsToken {
            params.insert("cls", normal_init(&mut rng, vec![d], 0.02));
        }

        for l in 0..config.layers {
            let p = |suffix: &str| format!("layer{l:02}.{suffix}");
            params.insert(&p("attn.wq"), glorot(&mut rng, d, d));
            params.insert(&p("attn.wk"), glorot(&mut rng, d, d));
            params.insert(&p("attn.wv"), glorot(&mut rng, d, d));
            params.insert(&p("attn.wo"), glorot(&mut rng, d, d));
            params.insert(&p("ln1.gamma"), ones(d));
            params.insert(&p("ln1.beta"), Tensor::zeros(vec![d]));
            params.insert(&p("ffn.w1"), glorot(&mut rng, d, config.d_ff));
            params.insert(&p("ffn.b1"), Tensor::zeros(vec![config.d_ff]));
            params.insert(&p("ffn.w2"), glorot(&mut rng, config.d_ff, d));
            params.insert(&p("ffn.b2"), Tensor::zeros(vec![d]));
            params.insert(&p("ln2.gamma"), ones(d));
            params.insert(&p("ln2.beta"), Tensor::zeros(vec![d]));
        }

        match config.head {
            HeadKind::FeaturewiseProjection => {
                // One weight per time step, shared across features.
                let limit = (6.0 / (config.window as f64 + 1.0)).sqrt();
                params.insert(
                    "head.time_proj",
                    uniform_init(&mut rng, vec![config.window], limit),
                );
            }
            HeadKind::FeaturewiseEmbedding => {
                // Per-(time, feature) weights; each column is an independent
                // time-weight vector, scaled like the shared variant.
                let limit = (6.0 / (config.window as f64 + 1.0)).sqrt();
                params.insert(
                    "head.time_embed",
                    uniform_init(&mut rng, vec![config.window, d], limit),
                );
            }
            _ => {}
        }

        let v_dim = match config.head {
            HeadKind::Flatten => config.seq_len() * d,
            _ => d,
        };
        params.insert("out.w1", glorot(&mut rng, v_dim, config.mlp_hidden));
        params.insert("out.b1", Tensor::zeros(vec![config.mlp_hidden]));
        params.insert("out.w2", glorot(&mut rng, config.mlp_hidden, 1));
        params.insert("out.b2", Tensor::zeros(vec![1]));

        Ok(Self { config, layout, params })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn layout(&self) -> &FeatureLayout {
        &self.layout
    }

    pub fn params(&self) -> &ParameterSet {
        &self.params
    }

    /// Mutable access for the optimizer (and for zero-weight test fixtures).
    pub fn params_mut(&mut self) -> &mut ParameterSet {
        &mut self.params
    }

    /// Total scalar parameter count.
    pub fn param_count(&self) -> usize {
        self.params.total_elements()
    }

    /// Probability that the window's final flow is an attack.
    pub fn forward(&self, window: &EncodedWindow) -> Result<f64, ModelError> {
        Ok(self.forward_batch(&WindowBatch::from_refs(&[window])?)?[0])
    }

    /// Batched forward: one probability per window.
    pub fn forward_batch(&self, batch: &WindowBatch) -> Result<Vec<f64>, ModelError> {
        let tape = Tape::new();
        let vars = tape.register(&self.params)?;
        let probs = graph::model_probabilities(&tape, &vars, self, batch)?;
        Ok(probs.value().data().to_vec())
    }

    /// Batched forward that also returns every layer's attention weights
    /// (`(windows·heads·seq) × seq`, one tensor per layer).
    pub fn forward_batch_with_attention(
        &self,
        batch: &WindowBatch,
    ) -> Result<(Vec<f64>, Vec<Tensor>), ModelError> {
        let tape = Tape::new();
        let vars = tape.register(&self.params)?;
        let probs = graph::model_probabilities(&tape, &vars, self, batch)?;
        Ok((probs.value().data().to_vec(), tape.attention_weights()))
    }

    /// The encoded input sequence one window produces: input encoding plus
    /// the positional rows for the window's slots.
    pub fn encode_input(&self, window: &EncodedWindow) -> Result<Tensor, ModelError> {
        let batch = WindowBatch::from_refs(&[window])?;
        let tape = Tape::new();
        let vars = tape.register(&self.params)?;
        let encoded = graph::encode_windows(&tape, &vars, self, &batch)?;
        // Positional rows for the window slots only; the CLS slot, when
        // present, is appended later in the forward graph.
        let win_pos = vars["pos"].select_rows(&(0..self.config.window).collect::<Vec<_>>())?;
        Ok(encoded.tile_add_rows(win_pos, batch.windows)?.value())
    }

    /// The block stack's output — `(windows · seq_len) × d_model` — for
    /// inspecting per-position behavior such as the causal-mask property.
    pub fn hidden_states(&self, batch: &WindowBatch) -> Result<Tensor, ModelError> {
        let tape = Tape::new();
        let vars = tape.register(&self.params)?;
        Ok(graph::model_hidden(&tape, &vars, self, batch)?.value())
    }

    /// Verifies the tape gradients of the mean BCE loss on `batch` against
    /// central finite differences, element by element over every parameter.
    pub fn check_gradients(
        &self,
        batch: &WindowBatch,
        tolerance: f64,
    ) -> Result<GradCheckReport, ModelError> {
        // Surface shape and lookup errors before the sweep so the closure
        // below can only fail inside the graph itself.
        self.forward_batch(batch)?;
        Ok(grad_check(
            |tape, vars| {
                model_loss(tape, vars, self, batch)
                    .map(|(loss, _)| loss)
                    .map_err(flatten_autograd)
            },
            &self.params,
            tolerance,
        )?)
    }
}

pub(crate) use graph::model_loss;

/// Gradient-check closures must speak `AutogradError`; anything that is not
/// already one indicates a config or shape problem the pre-flight forward
/// pass should have caught.
pub(crate) fn flatten_autograd(e: ModelError) -> AutogradError {
    match e {
        ModelError::Autograd(a) => a,
        other => AutogradError::ShapeMismatch {
            op: "model graph",
            detail: other.to_string(),
        },
    }
}

fn glorot(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    let limit = (6.0 / (rows + cols) as f64).sqrt();
    uniform_init(rng, vec![rows, cols], limit)
}

fn uniform_init(rng: &mut ChaCha8Rng, shape: Vec<usize>, limit: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-limit..limit)).collect();
    Tensor::new(shape, data).expect("shape/data agree by construction")
}

fn normal_init(rng: &mut ChaCha8Rng, shape: Vec<usize>, std: f64) -> Tensor {
    let dist = Normal::new(0.0, std).expect("valid normal");
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| dist.sample(rng)).collect();
    Tensor::new(shape, data).expect("shape/data agree by construction")
}

fn ones(n: usize) -> Tensor {
    Tensor::vector(vec![1.0; n])
}
