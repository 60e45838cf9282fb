//! Throughput measurement: training and inference flows/sec under a fixed
//! protocol — untimed warmup, per-batch timing, median-of-repeats for
//! inference, and a median-based outlier scan.
//!
//! All timing goes through the injectable [`Clock`] so the whole pipeline is
//! exactly reproducible under a fake clock in tests, and so reports embed
//! timings that reproduce the headline numbers arithmetically.

use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Mutex;
use std::time::Instant;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autograd::{adam_step, AdamState, AutogradError};
use crate::model::{model_loss, Model, ModelError, WindowBatch};
use crate::preprocess::EncodedWindow;

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("invalid bench config: {reason}")]
    BadConfig { reason: String },

    #[error("{what} needs at least {needed} windows, got {got}")]
    InsufficientData {
        what: &'static str,
        needed: usize,
        got: usize,
    },

    #[error("another timed section is already running")]
    TimedSectionBusy,

    #[error("timings must not be empty")]
    EmptyTimings,

    #[error(transparent)]
    Model(#[from] ModelError),

    #[error(transparent)]
    Autograd(#[from] AutogradError),
}

/// Monotonic time source in seconds. Injectable so benchmarks are testable
/// and grid reports are reproducible.
pub trait Clock: Sync {
    fn now(&self) -> f64;
}

/// Wall-clock seconds since construction.
pub struct RealClock {
    origin: Instant,
}

impl RealClock {
    pub fn new() -> Self {
        Self { origin: Instant::now() }
    }
}

impl Default for RealClock {
    fn default() -> Self {
        Self::new()
    }
}

impl Clock for RealClock {
    fn now(&self) -> f64 {
        self.origin.elapsed().as_secs_f64()
    }
}

/// Deterministic clock advancing a fixed step on every reading, so a timed
/// span bounded by two readings always measures exactly one step.
pub struct FakeClock {
    state: Mutex<f64>,
    step: f64,
}

impl FakeClock {
    pub fn new(step: f64) -> Self {
        Self { state: Mutex::new(0.0), step }
    }
}

impl Clock for FakeClock {
    fn now(&self) -> f64 {
        let mut t = self.state.lock().expect("clock lock");
        let reading = *t;
        *t += self.step;
        reading
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchConfig {
    pub batch_size: usize,
    #[serde(default = "default_warmup_batches")]
    pub warmup_batches: usize,
    #[serde(default = "default_inference_repeats")]
    pub inference_repeats: usize,
    #[serde(default = "default_inference_batches")]
    pub inference_batches: usize,
    #[serde(default = "default_outlier_factor")]
    pub outlier_factor: f64,
    #[serde(default)]
    pub seed: u64,
}

fn default_warmup_batches() -> usize {
    3
}

fn default_inference_repeats() -> usize {
    4
}

fn default_inference_batches() -> usize {
    50
}

fn default_outlier_factor() -> f64 {
    3.0
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            batch_size: 128,
            warmup_batches: default_warmup_batches(),
            inference_repeats: default_inference_repeats(),
            inference_batches: default_inference_batches(),
            outlier_factor: default_outlier_factor(),
            seed: 0,
        }
    }
}

impl BenchConfig {
    pub fn validate(&self) -> Result<(), BenchError> {
        let fail = |reason: &str| Err(BenchError::BadConfig { reason: reason.into() });
        if self.batch_size == 0 || self.inference_batches == 0 {
            return fail("batch_size and inference_batches must be positive");
        }
        if self.inference_repeats < 2 {
            return fail("inference_repeats must be at least 2");
        }
        if !self.outlier_factor.is_finite() || self.outlier_factor <= 0.0 {
            return fail("outlier_factor must be a positive finite number");
        }
        Ok(())
    }
}

/// Measured throughputs plus the raw timings they were aggregated from.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BenchReport {
    pub config: BenchConfig,
    pub train_flows_per_sec: f64,
    pub inference_flows_per_sec: f64,
    /// Seconds per measured training batch (warmup excluded).
    pub train_batch_seconds: Vec<f64>,
    /// Median-of-repeats seconds per inference batch.
    pub inference_batch_median_seconds: Vec<f64>,
    /// Inference batches whose median exceeded `outlier_factor ×` the
    /// median of all batch medians.
    pub outlier_batch_indices: Vec<usize>,
}

/// Only one timed section may run at a time; concurrent benchmarks would
/// contend for cores and time each other's noise.
static TIMED_SECTION: AtomicBool = AtomicBool::new(false);

struct TimedSection;

impl TimedSection {
    fn enter() -> Result<Self, BenchError> {
        if TIMED_SECTION
            .compare_exchange(false, true, Ordering::Acquire, Ordering::Relaxed)
            .is_err()
        {
            return Err(BenchError::TimedSectionBusy);
        }
        Ok(Self)
    }
}

impl Drop for TimedSection {
    fn drop(&mut self) {
        TIMED_SECTION.store(false, Ordering::Release);
    }
}

/// Training throughput: consecutive batches are stepped through a clone of
/// the model (forward, backward, Adam update); the first `warmup_batches`
/// run untimed, every remaining full batch is timed, and the result is the
/// mean of the per-batch `batch_size / seconds` rates.
pub fn measure_train_throughput(
    model: &Model,
    windows: &[EncodedWindow],
    cfg: &BenchConfig,
    clock: &dyn Clock,
) -> Result<f64, BenchError> {
    Ok(train_timings(model, windows, cfg, clock)?.0)
}

fn train_timings(
    model: &Model,
    windows: &[EncodedWindow],
    cfg: &BenchConfig,
    clock: &dyn Clock,
) -> Result<(f64, Vec<f64>), BenchError> {
    cfg.validate()?;
    let _section = TimedSection::enter()?;
    let b = cfg.batch_size;
    let total = windows.len() / b;
    if total < cfg.warmup_batches + 1 {
        return Err(BenchError::InsufficientData {
            what: "training bench",
            needed: (cfg.warmup_batches + 1) * b,
            got: windows.len(),
        });
    }
    let mut model = model.clone();
    let mut adam = AdamState::new(1e-3, model.params());
    let mut seconds = Vec::with_capacity(total - cfg.warmup_batches);
    for i in 0..total {
        let batch = WindowBatch::from_refs(
            &windows[i * b..(i + 1) * b].iter().collect::<Vec<_>>(),
        )?;
        if i < cfg.warmup_batches {
            train_step(&mut model, &batch, &mut adam)?;
        } else {
            let start = clock.now();
            train_step(&mut model, &batch, &mut adam)?;
            seconds.push(clock.now() - start);
        }
    }
    let rate = seconds.iter().map(|&s| b as f64 / s).sum::<f64>() / seconds.len() as f64;
    Ok((rate, seconds))
}

fn train_step(
    model: &mut Model,
    batch: &WindowBatch,
    adam: &mut AdamState,
) -> Result<(), BenchError> {
    let tape = crate::autograd::Tape::new();
    let vars = tape.register(model.params())?;
    let (loss, _) = model_loss(&tape, &vars, model, batch)?;
    let grads = tape.backward(loss)?.named(&vars);
    adam_step(model.params_mut(), &grads, adam)?;
    Ok(())
}

/// Inference throughput: `inference_batches` seeded random batches, each
/// forwarded `inference_repeats` times; per batch the median repeat time is
/// kept, and the result is `batch_size / mean(medians)`.
pub fn measure_inference_throughput(
    model: &Model,
    windows: &[EncodedWindow],
    cfg: &BenchConfig,
    clock: &dyn Clock,
) -> Result<f64, BenchError> {
    Ok(inference_timings(model, windows, cfg, clock)?.0)
}

fn inference_timings(
    model: &Model,
    windows: &[EncodedWindow],
    cfg: &BenchConfig,
    clock: &dyn Clock,
) -> Result<(f64, Vec<f64>), BenchError> {
    cfg.validate()?;
    let _section = TimedSection::enter()?;
    let b = cfg.batch_size;
    if windows.is_empty() {
        return Err(BenchError::InsufficientData {
            what: "inference bench",
            needed: 1,
            got: 0,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut medians = Vec::with_capacity(cfg.inference_batches);
    let mut repeats = Vec::with_capacity(cfg.inference_repeats);
    for _ in 0..cfg.inference_batches {
        let picks: Vec<&EncodedWindow> = (0..b)
            .map(|_| &windows[rng.random_range(0..windows.len())])
            .collect();
        let batch = WindowBatch::from_refs(&picks)?;
        repeats.clear();
        for _ in 0..cfg.inference_repeats {
            let start = clock.now();
            model.forward_batch(&batch)?;
            repeats.push(clock.now() - start);
        }
        medians.push(median(&repeats));
    }
    let mean = medians.iter().sum::<f64>() / medians.len() as f64;
    Ok((b as f64 / mean, medians))
}

/// Indices of timings strictly greater than `factor ×` the median.
pub fn outlier_scan(timings: &[f64], factor: f64) -> Result<Vec<usize>, BenchError> {
    if timings.is_empty() {
        return Err(BenchError::EmptyTimings);
    }
    let cutoff = factor * median(timings);
    Ok(timings
        .iter()
        .enumerate()
        .filter(|(_, &t)| t > cutoff)
        .map(|(i, _)| i)
        .collect())
}

/// Median with the even-length convention of averaging the two middles.
fn median(xs: &[f64]) -> f64 {
    let mut sorted = xs.to_vec();
    sorted.sort_unstable_by(f64::total_cmp);
    let n = sorted.len();
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        (sorted[n / 2 - 1] + sorted[n / 2]) / 2.0
    }
}

/// Runs both measurements and the outlier scan into one report.
pub fn run_bench(
    model: &Model,
    windows: &[EncodedWindow],
    cfg: &BenchConfig,
    clock: &dyn Clock,
) -> Result<BenchReport, BenchError> {
    let (train_flows_per_sec, train_batch_seconds) =
        train_timings(model, windows, cfg, clock)?;
    let (inference_flows_per_sec, inference_batch_median_seconds) =
        inference_timings(model, windows, cfg, clock)?;
    let outlier_batch_indices =
        outlier_scan(&inference_batch_median_seconds, cfg.outlier_factor)?;
    Ok(BenchReport {
        config: cfg.clone(),
        train_flows_per_sec,
        inference_flows_per_sec,
        train_batch_seconds,
        inference_batch_median_seconds,
        outlier_batch_indices,
    })
}

/// One-line CSV summary; the raw timings live in the JSON rendering.
pub fn bench_csv(report: &BenchReport) -> String {
    let mut out = String::from(
        "batch_size,train_flows_per_sec,inference_flows_per_sec,train_batches,inference_batches,outliers\n",
    );
    out.push_str(&format!(
        "{},{},{},{},{},{}\n",
        report.config.batch_size,
        report.train_flows_per_sec,
        report.inference_flows_per_sec,
        report.train_batch_seconds.len(),
        report.inference_batch_median_seconds.len(),
        report.outlier_batch_indices.len(),
    ));
    out
}
