//! Adam + BCE training with a fixed batch/epoch budget and early stopping,
//! plus the best-of-repeats hyperparameter grid search.
//!
//! Every batch is sampled with replacement from a seeded stream, so one
//! `(config, seed, data)` triple reproduces a run exactly. The grid search
//! derives one seed per (cell, repeat) from the master seed and keeps the
//! best repeat per cell; with an injected fake clock its whole result table
//! — throughput columns included — is byte-reproducible.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autograd::{adam_step, bce_scalar, AdamState, AutogradError, Tape};
use crate::bench::{
    measure_inference_throughput, measure_train_throughput, BenchConfig, BenchError, Clock,
};
use crate::metrics::{confusion, derive, threshold_probs, MetricsError, MetricsReport};
use crate::model::{
    model_loss, BlockType, FeatureLayout, HeadKind, InputEncodingKind, Model, ModelConfig,
    ModelError, WindowBatch,
};
use crate::preprocess::EncodedWindow;

/// Windows forwarded per graph during evaluation; bounds peak memory while
/// keeping matmuls wide enough to be worth it.
const EVAL_CHUNK: usize = 256;

#[derive(Debug, Error)]
pub enum TrainingError {
    #[error("invalid training config: {reason}")]
    BadConfig { reason: String },

    #[error("the {which} split must not be empty")]
    EmptySplit { which: &'static str },

    #[error("training aborted at epoch {epoch}, step {step}: {source}")]
    NonFiniteLoss {
        epoch: usize,
        step: usize,
        source: AutogradError,
    },

    #[error("every grid cell was skipped; nothing to train")]
    AllCellsInvalid,

    #[error(transparent)]
    Model(#[from] ModelError),

    #[error(transparent)]
    Autograd(#[from] AutogradError),

    #[error(transparent)]
    Metrics(#[from] MetricsError),

    #[error(transparent)]
    Bench(#[from] BenchError),
}

/// What early stopping watches. Only evaluation loss today, but the config
/// format names it explicitly so stored runs stay self-describing.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MonitorKind {
    EvalLoss,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_max_epochs")]
    pub max_epochs: usize,
    #[serde(default = "default_steps_per_epoch")]
    pub steps_per_epoch: usize,
    #[serde(default = "default_patience")]
    pub patience: usize,
    #[serde(default = "default_repeats")]
    pub repeats: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_monitor")]
    pub monitor: MonitorKind,
}

fn default_batch_size() -> usize {
    128
}

fn default_max_epochs() -> usize {
    20
}

fn default_steps_per_epoch() -> usize {
    64
}

fn default_patience() -> usize {
    5
}

fn default_repeats() -> usize {
    3
}

fn default_monitor() -> MonitorKind {
    MonitorKind::EvalLoss
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            batch_size: default_batch_size(),
            max_epochs: default_max_epochs(),
            steps_per_epoch: default_steps_per_epoch(),
            patience: default_patience(),
            repeats: default_repeats(),
            seed: 0,
            monitor: default_monitor(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainingError> {
        let fail = |reason: &str| Err(TrainingError::BadConfig { reason: reason.into() });
        if !self.learning_rate.is_finite() || self.learning_rate <= 0.0 {
            return fail("learning_rate must be a positive finite number");
        }
        if self.batch_size == 0
            || self.max_epochs == 0
            || self.steps_per_epoch == 0
            || self.patience == 0
            || self.repeats == 0
        {
            return fail("batch_size, epochs, steps, patience, and repeats must be positive");
        }
        if self.patience > self.max_epochs {
            return fail("patience cannot exceed max_epochs");
        }
        Ok(())
    }
}

/// One completed epoch: losses, evaluation metrics, and wall time.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochLog {
    /// 1-based epoch index.
    pub epoch: usize,
    pub train_loss: f64,
    pub eval_loss: f64,
    pub eval_metrics: MetricsReport,
    pub wall_secs: f64,
}

/// EpochLogs as line-delimited JSON for progress tooling.
pub fn epoch_log_jsonl(logs: &[EpochLog]) -> String {
    let mut out = String::new();
    for log in logs {
        out.push_str(&serde_json::to_string(log).expect("EpochLog serializes"));
        out.push('\n');
    }
    out
}

/// Patience-based early stopping: an epoch improves only when its monitored
/// value is strictly lower than the best seen; `patience` consecutive
/// non-improving epochs stop the run.
#[derive(Debug, Clone)]
pub struct EarlyStopping {
    patience: usize,
    best_value: f64,
    best_epoch: usize,
    stale: usize,
}

/// Verdict for one observed epoch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StopDecision {
    pub improved: bool,
    pub stop: bool,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        Self {
            patience,
            best_value: f64::INFINITY,
            best_epoch: 0,
            stale: 0,
        }
    }

    pub fn observe(&mut self, epoch: usize, value: f64) -> StopDecision {
        let improved = value < self.best_value;
        if improved {
            self.best_value = value;
            self.best_epoch = epoch;
            self.stale = 0;
        } else {
            self.stale += 1;
        }
        StopDecision { improved, stop: self.stale >= self.patience }
    }

    /// 1-based index of the best epoch observed so far (0 before any).
    pub fn best_epoch(&self) -> usize {
        self.best_epoch
    }

    pub fn best_value(&self) -> f64 {
        self.best_value
    }
}

/// A finished training run: the model with its best-epoch weights restored,
/// the per-epoch logs, and which epoch the restored weights come from.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: Model,
    pub epochs: Vec<EpochLog>,
    /// 1-based epoch whose weights the model carries.
    pub best_epoch: usize,
}

/// Trains with Adam on mean BCE: each epoch runs `steps_per_epoch` batches
/// of `batch_size` windows sampled with replacement from a stream seeded by
/// `cfg.seed`, then evaluates the monitor on the eval split. Stops early
/// after `patience` consecutive non-improving epochs and restores the
/// best-epoch weights bit-exactly.
pub fn train(
    mut model: Model,
    train_windows: &[EncodedWindow],
    eval_windows: &[EncodedWindow],
    cfg: &TrainConfig,
    clock: &dyn Clock,
) -> Result<TrainOutcome, TrainingError> {
    cfg.validate()?;
    if train_windows.is_empty() {
        return Err(TrainingError::EmptySplit { which: "train" });
    }
    if eval_windows.is_empty() {
        return Err(TrainingError::EmptySplit { which: "eval" });
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = AdamState::new(cfg.learning_rate, model.params());
    let mut stopper = EarlyStopping::new(cfg.patience);
    let mut best_params = model.params().clone();
    let mut logs = Vec::new();

    for epoch in 1..=cfg.max_epochs {
        let epoch_start = clock.now();
        let mut loss_sum = 0.0;
        for step in 1..=cfg.steps_per_epoch {
            let picks: Vec<&EncodedWindow> = (0..cfg.batch_size)
                .map(|_| &train_windows[rng.random_range(0..train_windows.len())])
                .collect();
            let batch = WindowBatch::from_refs(&picks)?;
            loss_sum += train_step(&mut model, &batch, &mut adam)
                .map_err(|e| annotate_non_finite(e, epoch, step))?;
        }
        let train_loss = loss_sum / cfg.steps_per_epoch as f64;

        let (eval_loss, eval_metrics) = eval_loss_and_metrics(&model, eval_windows, 0.5)?;
        let decision = match cfg.monitor {
            MonitorKind::EvalLoss => stopper.observe(epoch, eval_loss),
        };
        if decision.improved {
            best_params = model.params().clone();
        }
        logs.push(EpochLog {
            epoch,
            train_loss,
            eval_loss,
            eval_metrics,
            wall_secs: clock.now() - epoch_start,
        });
        if decision.stop {
            break;
        }
    }

    for (name, tensor) in best_params.iter() {
        model.params_mut().set(name, tensor.clone());
    }
    Ok(TrainOutcome {
        model,
        epochs: logs,
        best_epoch: stopper.best_epoch(),
    })
}

fn train_step(
    model: &mut Model,
    batch: &WindowBatch,
    adam: &mut AdamState,
) -> Result<f64, TrainingError> {
    let tape = Tape::new();
    let vars = tape.register(model.params())?;
    let (loss, _) = model_loss(&tape, &vars, model, batch)?;
    let loss_value = loss.value().item();
    let grads = tape.backward(loss)?.named(&vars);
    adam_step(model.params_mut(), &grads, adam)?;
    Ok(loss_value)
}

fn annotate_non_finite(e: TrainingError, epoch: usize, step: usize) -> TrainingError {
    // Non-finite values surface as autograd errors from whichever primitive
    // first produced them; stamp where in the schedule that happened.
    match e {
        TrainingError::Autograd(source @ AutogradError::NonFinite { .. }) => {
            TrainingError::NonFiniteLoss { epoch, step, source }
        }
        TrainingError::Model(ModelError::Autograd(source @ AutogradError::NonFinite { .. })) => {
            TrainingError::NonFiniteLoss { epoch, step, source }
        }
        other => other,
    }
}

/// Forwards every window (tie `p = threshold` counts as attack) and derives
/// the detection metrics.
pub fn evaluate(
    model: &Model,
    windows: &[EncodedWindow],
    threshold: f64,
) -> Result<MetricsReport, TrainingError> {
    Ok(eval_loss_and_metrics(model, windows, threshold)?.1)
}

/// Mean BCE over the windows plus thresholded metrics, in one pass.
pub fn eval_loss_and_metrics(
    model: &Model,
    windows: &[EncodedWindow],
    threshold: f64,
) -> Result<(f64, MetricsReport), TrainingError> {
    if windows.is_empty() {
        return Err(TrainingError::EmptySplit { which: "eval" });
    }
    let mut probs = Vec::with_capacity(windows.len());
    let mut labels = Vec::with_capacity(windows.len());
    for chunk in windows.chunks(EVAL_CHUNK) {
        let batch = WindowBatch::from_slice(chunk)?;
        probs.extend(model.forward_batch(&batch)?);
        labels.extend(chunk.iter().map(|w| w.label.as_u8()));
    }
    let loss = probs
        .iter()
        .zip(&labels)
        .map(|(&p, &y)| bce_scalar(p, f64::from(y)))
        .sum::<f64>()
        / probs.len() as f64;
    let preds = threshold_probs(&probs, threshold);
    let report = derive(confusion(&preds, &labels)?)?;
    Ok((loss, report))
}

/// Value lists for the seven searched dimensions. Everything else
/// (d_model, window, embed width, …) comes from the base config.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub input_encodings: Vec<InputEncodingKind>,
    pub block_types: Vec<BlockType>,
    pub layers: Vec<usize>,
    pub d_ffs: Vec<usize>,
    pub heads: Vec<usize>,
    pub class_heads: Vec<HeadKind>,
    pub learning_rates: Vec<f64>,
}

impl GridSpec {
    pub fn validate(&self) -> Result<(), TrainingError> {
        if self.input_encodings.is_empty()
            || self.block_types.is_empty()
            || self.layers.is_empty()
            || self.d_ffs.is_empty()
            || self.heads.is_empty()
            || self.class_heads.is_empty()
            || self.learning_rates.is_empty()
        {
            return Err(TrainingError::BadConfig {
                reason: "every grid dimension needs at least one value".into(),
            });
        }
        Ok(())
    }

    pub fn cells(&self) -> usize {
        self.input_encodings.len()
            * self.block_types.len()
            * self.layers.len()
            * self.d_ffs.len()
            * self.heads.len()
            * self.class_heads.len()
            * self.learning_rates.len()
    }

    /// Cell `index` decoded in row-major order over the dimensions in
    /// declaration order (learning rate varies fastest).
    fn cell(&self, base: &ModelConfig, index: usize) -> (ModelConfig, f64) {
        let mut ix = index;
        let pick = |ix: &mut usize, len: usize| {
            let p = *ix % len;
            *ix /= len;
            p
        };
        let lr = self.learning_rates[pick(&mut ix, self.learning_rates.len())];
        let head = self.class_heads[pick(&mut ix, self.class_heads.len())];
        let heads = self.heads[pick(&mut ix, self.heads.len())];
        let d_ff = self.d_ffs[pick(&mut ix, self.d_ffs.len())];
        let layers = self.layers[pick(&mut ix, self.layers.len())];
        let block_type = self.block_types[pick(&mut ix, self.block_types.len())];
        let input_encoding = self.input_encodings[pick(&mut ix, self.input_encodings.len())];
        let config = ModelConfig {
            block_type,
            layers,
            heads,
            d_ff,
            input_encoding,
            head,
            ..base.clone()
        };
        (config, lr)
    }
}

/// One searched cell that trained to completion.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GridCellResult {
    pub cell: usize,
    pub config: ModelConfig,
    pub learning_rate: f64,
    /// 0-based index of the winning repeat.
    pub best_repeat: usize,
    pub f1: f64,
    pub accuracy: f64,
    pub false_alarm_rate: f64,
    pub eval_loss: f64,
    pub param_count: usize,
    pub train_flows_per_sec: f64,
    pub inference_flows_per_sec: f64,
}

/// A cell whose config violates a model invariant, with the reason logged.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SkippedCell {
    pub cell: usize,
    pub config: ModelConfig,
    pub learning_rate: f64,
    pub reason: String,
}

/// The full grid outcome: `rows.len() + skipped.len() == cells`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GridResult {
    pub cells: usize,
    pub rows: Vec<GridCellResult>,
    pub skipped: Vec<SkippedCell>,
}

/// Exhaustive search over the grid: each valid cell trains `cfg.repeats`
/// times with seeds derived from `cfg.seed`, keeping the repeat with the
/// best eval F1 (ties: lower eval loss, then lower repeat index).
/// `threads > 1` trains cells on a rayon pool; the winning models are then
/// benched one at a time for the throughput columns, since timed sections
/// never overlap. Run single-threaded for byte-stable timing columns.
#[allow(clippy::too_many_arguments)]
pub fn grid_search(
    grid: &GridSpec,
    base_model: &ModelConfig,
    layout: &FeatureLayout,
    train_windows: &[EncodedWindow],
    eval_windows: &[EncodedWindow],
    cfg: &TrainConfig,
    bench: &BenchConfig,
    clock: &dyn Clock,
    threads: usize,
) -> Result<GridResult, TrainingError> {
    grid.validate()?;
    cfg.validate()?;
    let cells = grid.cells();

    let run_cell = |index: usize| -> Result<CellOutcome, TrainingError> {
        let (config, lr) = grid.cell(base_model, index);
        if let Err(e) = config.validate(layout) {
            return Ok(CellOutcome::Skipped(SkippedCell {
                cell: index,
                config,
                learning_rate: lr,
                reason: e.to_string(),
            }));
        }
        train_grid_cell(index, config, lr, layout, train_windows, eval_windows, cfg, clock)
            .map(|trained| CellOutcome::Trained(Box::new(trained)))
    };

    let outcomes: Vec<CellOutcome> = if threads > 1 {
        use rayon::prelude::*;
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .map_err(|e| TrainingError::BadConfig {
                reason: format!("could not build a {threads}-thread pool: {e}"),
            })?;
        pool.install(|| -> Result<Vec<CellOutcome>, TrainingError> {
            (0..cells).into_par_iter().map(run_cell).collect()
        })
    } else {
        (0..cells).map(run_cell).collect()
    }?;

    // Benchmarks run after the pool has drained, one cell at a time: timed
    // sections are exclusive process-wide, so they must never overlap.
    let mut rows = Vec::new();
    let mut skipped = Vec::new();
    for outcome in outcomes {
        match outcome {
            CellOutcome::Trained(cell) => {
                let train_rate =
                    measure_train_throughput(&cell.model, train_windows, bench, clock)?;
                let infer_rate =
                    measure_inference_throughput(&cell.model, eval_windows, bench, clock)?;
                rows.push(GridCellResult {
                    cell: cell.cell,
                    learning_rate: cell.learning_rate,
                    best_repeat: cell.best_repeat,
                    f1: cell.f1,
                    accuracy: cell.accuracy,
                    false_alarm_rate: cell.false_alarm_rate,
                    eval_loss: cell.eval_loss,
                    param_count: cell.model.param_count(),
                    train_flows_per_sec: train_rate,
                    inference_flows_per_sec: infer_rate,
                    config: cell.model.config().clone(),
                });
            }
            CellOutcome::Skipped(cell) => skipped.push(cell),
        }
    }
    if rows.is_empty() {
        return Err(TrainingError::AllCellsInvalid);
    }
    Ok(GridResult { cells, rows, skipped })
}

enum CellOutcome {
    Trained(Box<TrainedCell>),
    Skipped(SkippedCell),
}

/// A cell that finished training and still needs its benchmark columns.
struct TrainedCell {
    cell: usize,
    learning_rate: f64,
    best_repeat: usize,
    f1: f64,
    accuracy: f64,
    false_alarm_rate: f64,
    eval_loss: f64,
    model: Model,
}

#[allow(clippy::too_many_arguments)]
fn train_grid_cell(
    index: usize,
    config: ModelConfig,
    lr: f64,
    layout: &FeatureLayout,
    train_windows: &[EncodedWindow],
    eval_windows: &[EncodedWindow],
    cfg: &TrainConfig,
    clock: &dyn Clock,
) -> Result<TrainedCell, TrainingError> {
    let mut best: Option<(usize, TrainOutcome, f64, f64)> = None; // repeat, outcome, f1, loss
    for repeat in 0..cfg.repeats {
        let model_seed = derive_seed(cfg.seed, index, repeat, 0);
        let sample_seed = derive_seed(cfg.seed, index, repeat, 1);
        let mut repeat_config = config.clone();
        repeat_config.seed = model_seed;
        let repeat_cfg = TrainConfig {
            learning_rate: lr,
            seed: sample_seed,
            ..cfg.clone()
        };
        let model = Model::build(repeat_config, layout.clone())?;
        let outcome = train(model, train_windows, eval_windows, &repeat_cfg, clock)?;
        let log = outcome
            .epochs
            .iter()
            .find(|l| l.epoch == outcome.best_epoch)
            .expect("best epoch is always logged");
        let (f1, loss) = (log.eval_metrics.f1, log.eval_loss);
        let wins = match &best {
            None => true,
            Some((_, _, best_f1, best_loss)) => {
                f1 > *best_f1 || (f1 == *best_f1 && loss < *best_loss)
            }
        };
        if wins {
            best = Some((repeat, outcome, f1, loss));
        }
    }
    let (best_repeat, outcome, f1, eval_loss) = best.expect("repeats ≥ 1");
    let log = outcome
        .epochs
        .iter()
        .find(|l| l.epoch == outcome.best_epoch)
        .expect("best epoch is always logged");

    Ok(TrainedCell {
        cell: index,
        learning_rate: lr,
        best_repeat,
        f1,
        accuracy: log.eval_metrics.accuracy,
        false_alarm_rate: log.eval_metrics.false_alarm_rate,
        eval_loss,
        model: outcome.model,
    })
}

/// SplitMix64, the standard 64-bit mix; used to derive independent seeds.
pub(crate) fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Seed for one (cell, repeat, stream) triple — stream 0 initializes the
/// model, stream 1 drives batch sampling.
fn derive_seed(master: u64, cell: usize, repeat: usize, stream: u64) -> u64 {
    let a = splitmix64(master ^ splitmix64(cell as u64 + 1));
    splitmix64(a ^ splitmix64((repeat as u64) << 8 | stream))
}

/// Result rows as CSV: config columns then metric columns, one row per
/// trained cell, in cell order.
pub fn grid_csv(result: &GridResult) -> String {
    let mut out = String::from(
        "cell,input_encoding,block_type,layers,d_ff,heads,head,learning_rate,best_repeat,\
         f1,accuracy,false_alarm_rate,eval_loss,param_count,train_flows_per_sec,inference_flows_per_sec\n",
    );
    for row in &result.rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}\n",
            row.cell,
            row.config.input_encoding,
            row.config.block_type,
            row.config.layers,
            row.config.d_ff,
            row.config.heads,
            row.config.head,
            row.learning_rate,
            row.best_repeat,
            row.f1,
            row.accuracy,
            row.false_alarm_rate,
            row.eval_loss,
            row.param_count,
            row.train_flows_per_sec,
            row.inference_flows_per_sec,
        ));
    }
    out
}

/// Skipped cells as CSV, mirroring the result table's config columns.
pub fn grid_skipped_csv(result: &GridResult) -> String {
    let mut out = String::from("cell,input_encoding,block_type,layers,d_ff,heads,head,learning_rate,reason\n");
    for cell in &result.skipped {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{:?}\n",
            cell.cell,
            cell.config.input_encoding,
            cell.config.block_type,
            cell.config.layers,
            cell.config.d_ff,
            cell.config.heads,
            cell.config.head,
            cell.learning_rate,
            cell.reason,
        ));
    }
    out
}
