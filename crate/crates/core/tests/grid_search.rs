//! Grid search end to end: cell accounting, skip logging, and byte-identical
//! CSV output across repeated and differently-threaded runs.

use flowsentry::bench::{BenchConfig, FakeClock};
use flowsentry::dataset::BinaryLabel;
use flowsentry::model::{BlockType, FeatureLayout, HeadKind, InputEncodingKind, ModelConfig};
use flowsentry::preprocess::EncodedWindow;
use flowsentry::training::{
    grid_csv, grid_search, grid_skipped_csv, GridResult, GridSpec, TrainConfig, TrainingError,
};

/// Grid cells bench their winners inside exclusive timed sections, so tests
/// that search must not overlap. Poison recovery keeps one failing test from
/// knocking out the rest; the guard protects no data.
static BENCH_LOCK: std::sync::Mutex<()> = std::sync::Mutex::new(());

fn bench_lock() -> std::sync::MutexGuard<'static, ()> {
    BENCH_LOCK.lock().unwrap_or_else(std::sync::PoisonError::into_inner)
}

fn windows(n: usize) -> Vec<EncodedWindow> {
    (0..n)
        .map(|i| {
            let hot = i % 2 == 0;
            let x = if hot { 0.9 } else { 0.1 };
            EncodedWindow {
                window: 2,
                width: 3,
                features: vec![0.3, 0.5, 0.2, x, 0.4, (i % 5) as f64 / 5.0],
                label: if hot { BinaryLabel::Attack } else { BinaryLabel::Benign },
                pad_count: 0,
            }
        })
        .collect()
}

fn base() -> (ModelConfig, FeatureLayout) {
    let config = ModelConfig {
        block_type: BlockType::Encoder,
        layers: 1,
        heads: 2,
        d_model: 8,
        d_ff: 16,
        input_encoding: InputEncodingKind::RecordProjection,
        head: HeadKind::LastToken,
        window: 2,
        embed_dim: 4,
        mlp_hidden: 8,
        seed: 0,
    };
    let layout = FeatureLayout {
        feature_width: 3,
        categorical_cardinalities: vec![],
        integer_mode: false,
    };
    (config, layout)
}

fn quick_train() -> TrainConfig {
    TrainConfig {
        learning_rate: 1e-3,
        batch_size: 8,
        max_epochs: 2,
        steps_per_epoch: 2,
        patience: 2,
        repeats: 2,
        seed: 42,
        ..TrainConfig::default()
    }
}

fn quick_bench() -> BenchConfig {
    BenchConfig {
        batch_size: 8,
        warmup_batches: 1,
        inference_repeats: 2,
        inference_batches: 2,
        outlier_factor: 3.0,
        seed: 0,
    }
}

fn two_by_two() -> GridSpec {
    GridSpec {
        input_encodings: vec![InputEncodingKind::None, InputEncodingKind::RecordProjection],
        block_types: vec![BlockType::Encoder],
        layers: vec![1],
        d_ffs: vec![16],
        heads: vec![2],
        class_heads: vec![HeadKind::LastToken],
        learning_rates: vec![3e-3, 1e-3],
    }
}

fn run(grid: &GridSpec, threads: usize) -> Result<GridResult, TrainingError> {
    let (config, layout) = base();
    let train = windows(32);
    let eval = windows(16);
    grid_search(
        grid,
        &config,
        &layout,
        &train,
        &eval,
        &quick_train(),
        &quick_bench(),
        &FakeClock::new(0.001),
        threads,
    )
}

#[test]
fn two_identical_runs_emit_byte_identical_csvs() {
    let _bench = bench_lock();
    let grid = two_by_two();
    let a = run(&grid, 1).unwrap();
    let b = run(&grid, 1).unwrap();
    assert_eq!(grid_csv(&a), grid_csv(&b));
    assert_eq!(grid_skipped_csv(&a), grid_skipped_csv(&b));

    assert_eq!(a.cells, 4);
    assert_eq!(a.rows.len(), 4);
    assert!(a.skipped.is_empty());
    // One header plus one line per trained cell.
    assert_eq!(grid_csv(&a).lines().count(), 5);
}

#[test]
fn cells_enumerate_with_learning_rate_fastest() {
    let _bench = bench_lock();
    let result = run(&two_by_two(), 1).unwrap();
    let seen: Vec<(usize, InputEncodingKind, f64)> = result
        .rows
        .iter()
        .map(|r| (r.cell, r.config.input_encoding, r.learning_rate))
        .collect();
    assert_eq!(
        seen,
        vec![
            (0, InputEncodingKind::None, 3e-3),
            (1, InputEncodingKind::None, 1e-3),
            (2, InputEncodingKind::RecordProjection, 3e-3),
            (3, InputEncodingKind::RecordProjection, 1e-3),
        ]
    );
    for row in &result.rows {
        assert!(row.best_repeat < 2);
        assert!((0.0..=1.0).contains(&row.f1));
        assert!(row.param_count > 0);
        assert!(row.train_flows_per_sec > 0.0);
        assert!(row.inference_flows_per_sec > 0.0);
    }
}

#[test]
fn a_thread_pool_changes_nothing_in_the_report() {
    let _bench = bench_lock();
    let grid = two_by_two();
    let serial = run(&grid, 1).unwrap();
    let pooled = run(&grid, 2).unwrap();
    // Training is seeded per cell and benchmarks run one at a time after the
    // pool drains, so even the timing columns agree under a fake clock.
    assert_eq!(grid_csv(&serial), grid_csv(&pooled));
}

#[test]
fn invalid_cells_are_skipped_with_reasons() {
    let _bench = bench_lock();
    let grid = GridSpec {
        input_encodings: vec![InputEncodingKind::RecordProjection],
        block_types: vec![BlockType::Encoder],
        layers: vec![1],
        d_ffs: vec![16],
        heads: vec![2, 3], // d_model = 8: three heads cannot divide it
        class_heads: vec![HeadKind::LastToken],
        learning_rates: vec![1e-3],
    };
    let result = run(&grid, 1).unwrap();
    assert_eq!(result.cells, 2);
    assert_eq!(result.rows.len() + result.skipped.len(), result.cells);
    assert_eq!(result.skipped.len(), 1);
    let skip = &result.skipped[0];
    assert_eq!(skip.config.heads, 3);
    assert!(skip.reason.contains("not divisible"), "reason: {}", skip.reason);
    assert_eq!(grid_skipped_csv(&result).lines().count(), 2);
}

#[test]
fn a_grid_with_no_valid_cells_is_an_error() {
    let _bench = bench_lock();
    let grid = GridSpec {
        heads: vec![3],
        ..two_by_two()
    };
    assert!(matches!(run(&grid, 1), Err(TrainingError::AllCellsInvalid)));
}

#[test]
fn an_empty_dimension_is_rejected_before_any_training() {
    let grid = GridSpec {
        learning_rates: vec![],
        ..two_by_two()
    };
    assert!(matches!(run(&grid, 1), Err(TrainingError::BadConfig { .. })));
}
