//! The shared data path every command walks: ingest each dataset, fuse,
//! split, fit the preprocessor on the training rows only, transform both
//! splits, and cut them into windows.

use flowsentry::dataset::{fuse, ingest_csv, split, DatasetSpec, RawFlowTable};
use flowsentry::model::FeatureLayout;
use flowsentry::preprocess::{fit, make_windows, transform, EncodedWindow, PreprocessorState};

use crate::config::RunConfig;
use crate::error::CliError;

/// Everything downstream of the raw CSVs, ready for training or evaluation.
pub struct PreparedData {
    pub state: PreprocessorState,
    pub layout: FeatureLayout,
    pub train_windows: Vec<EncodedWindow>,
    pub eval_windows: Vec<EncodedWindow>,
    pub train_rows: usize,
    pub eval_rows: usize,
}

/// Ingests and fuses the configured datasets into one shuffled table.
pub fn ingest_fused(cfg: &RunConfig, specs: &[DatasetSpec]) -> Result<RawFlowTable, CliError> {
    let mut tables = Vec::with_capacity(cfg.datasets.len());
    for (entry, spec) in cfg.datasets.iter().zip(specs) {
        tables.push(ingest_csv(&entry.csv, spec)?);
    }
    Ok(fuse(&tables, cfg.fusion_seed)?)
}

/// Runs the full deterministic path from CSVs to windows. Both splits are
/// encoded with the state fitted on the training rows alone.
pub fn prepare(cfg: &RunConfig, specs: &[DatasetSpec]) -> Result<PreparedData, CliError> {
    let fused = ingest_fused(cfg, specs)?;
    let (train_table, eval_table) = split(&fused, cfg.split.train_fraction, cfg.split.seed)?;
    let spec = &specs[0];
    let state = fit(&train_table, spec, cfg.preprocess.n_top, cfg.preprocess.mode)?;
    let layout = FeatureLayout::from_state(&state);

    let train_encoded = transform(&train_table, &state)?;
    let eval_encoded = transform(&eval_table, &state)?;
    let train_windows = make_windows(&train_encoded, cfg.preprocess.window)?;
    let eval_windows = make_windows(&eval_encoded, cfg.preprocess.window)?;

    Ok(PreparedData {
        state,
        layout,
        train_windows,
        eval_windows,
        train_rows: train_table.n_rows(),
        eval_rows: eval_table.n_rows(),
    })
}
