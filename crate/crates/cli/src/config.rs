//! The run configuration file: one JSON document wiring datasets through
//! preprocessing, the model, training, and benchmarking.

use std::path::{Path, PathBuf};

use flowsentry::bench::BenchConfig;
use flowsentry::dataset::{load_spec, DatasetSpec};
use flowsentry::model::ModelConfig;
use flowsentry::preprocess::EncodingMode;
use flowsentry::training::{GridSpec, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::error::CliError;

/// One source dataset: the column contract and the flows it applies to.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetEntry {
    /// Path to a dataset spec JSON (columns, label convention).
    pub spec: PathBuf,
    /// Path to the flow CSV the spec describes.
    pub csv: PathBuf,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct SplitConfig {
    /// Fraction of fused rows that become the training split, in (0, 1).
    pub train_fraction: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct PreprocessConfig {
    /// Retained categories per categorical field; the rest pool as "other".
    pub n_top: usize,
    pub mode: EncodingMode,
    /// Flows per window.
    pub window: usize,
}

/// Everything a run needs. All randomness flows from the seeds written
/// here; nothing is seeded from the wall clock.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunConfig {
    pub datasets: Vec<DatasetEntry>,
    #[serde(default)]
    pub fusion_seed: u64,
    pub split: SplitConfig,
    pub preprocess: PreprocessConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub bench: BenchConfig,
    /// Dimension lists for the `grid` subcommand; optional otherwise.
    #[serde(default)]
    pub grid: Option<GridSpec>,
    pub output_directory: PathBuf,
}

/// Loads a run config, resolving every relative path against the config
/// file's own directory so a run directory can be moved wholesale.
pub fn load_run_config(path: &Path) -> Result<RunConfig, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::read(path, e))?;
    let mut config: RunConfig = serde_json::from_str(&text)
        .map_err(|e| CliError::Data(format!("malformed run config {}: {e}", path.display())))?;
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    for entry in &mut config.datasets {
        entry.spec = resolve(base, &entry.spec);
        entry.csv = resolve(base, &entry.csv);
    }
    config.output_directory = resolve(base, &config.output_directory);
    Ok(config)
}

fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

impl RunConfig {
    /// Checks everything checkable without reading the flow CSVs: specs
    /// load and validate, data files exist, and each nested config holds
    /// its own invariants.
    pub fn validate(&self) -> Result<Vec<DatasetSpec>, CliError> {
        if self.datasets.is_empty() {
            return Err(CliError::Data("run config lists no datasets".into()));
        }
        let mut specs = Vec::with_capacity(self.datasets.len());
        for entry in &self.datasets {
            let spec = load_spec(&entry.spec)?;
            if !entry.csv.is_file() {
                return Err(CliError::Data(format!(
                    "dataset {:?}: csv not found at {}",
                    spec.name,
                    entry.csv.display()
                )));
            }
            specs.push(spec);
        }
        if !(self.split.train_fraction > 0.0 && self.split.train_fraction < 1.0) {
            return Err(CliError::Data(format!(
                "split.train_fraction must lie in (0, 1), got {}",
                self.split.train_fraction
            )));
        }
        if self.preprocess.n_top < 1 {
            return Err(CliError::Data("preprocess.n_top must be at least 1".into()));
        }
        if self.preprocess.window < 1 {
            return Err(CliError::Data("preprocess.window must be at least 1".into()));
        }
        if self.model.window != self.preprocess.window {
            return Err(CliError::Data(format!(
                "model.window ({}) must equal preprocess.window ({})",
                self.model.window, self.preprocess.window
            )));
        }
        if self.preprocess.mode != EncodingMode::Integer
            && self.model.input_encoding
                == flowsentry::model::InputEncodingKind::CategoricalEmbedLookup
        {
            return Err(CliError::Data(
                "categorical_embed_lookup needs preprocess.mode = \"integer\"".into(),
            ));
        }
        self.train.validate().map_err(CliError::from)?;
        self.bench.validate().map_err(CliError::from)?;
        if let Some(grid) = &self.grid {
            grid.validate().map_err(CliError::from)?;
        }
        Ok(specs)
    }

    /// The column contract all fused datasets share; fusion enforces the
    /// sharing, so the first spec speaks for every table.
    pub fn primary_spec(&self) -> Result<DatasetSpec, CliError> {
        let entry = self
            .datasets
            .first()
            .ok_or_else(|| CliError::Data("run config lists no datasets".into()))?;
        Ok(load_spec(&entry.spec)?)
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use std::io::Write;

    /// Writes a tiny spec + CSV (10 flows) + run config into `dir` and
    /// returns the config path. Shared by the sibling modules' tests.
    pub(crate) fn demo_json(dir: &Path) -> PathBuf {
        let spec = serde_json::json!({
            "name": "demo",
            "categorical_fields": ["PROTO"],
            "numerical_fields": ["BYTES"],
            "label_column": "Label",
            "benign_label": "Benign"
        });
        std::fs::write(dir.join("spec.json"), spec.to_string()).unwrap();
        let mut csv = std::fs::File::create(dir.join("flows.csv")).unwrap();
        writeln!(csv, "PROTO,BYTES,Label").unwrap();
        for i in 0..10 {
            writeln!(csv, "tcp,{i},{}", if i % 2 == 0 { "Benign" } else { "ddos" }).unwrap();
        }
        let config = serde_json::json!({
            "datasets": [{"spec": "spec.json", "csv": "flows.csv"}],
            "fusion_seed": 1,
            "split": {"train_fraction": 0.8, "seed": 2},
            "preprocess": {"n_top": 3, "mode": "one_hot", "window": 2},
            "model": {
                "block_type": "encoder", "layers": 1, "heads": 2, "d_model": 8,
                "d_ff": 16, "input_encoding": "record_projection",
                "head": "last_token", "window": 2, "seed": 7
            },
            "train": {"learning_rate": 1e-3, "batch_size": 4, "max_epochs": 2,
                      "steps_per_epoch": 2, "patience": 1, "repeats": 1, "seed": 3},
            "bench": {"batch_size": 4},
            "output_directory": "out"
        });
        let path = dir.join("run.json");
        std::fs::write(&path, config.to_string()).unwrap();
        path
    }

    #[test]
    fn relative_paths_resolve_against_the_config_directory() {
        let dir = tempfile::tempdir().unwrap();
        let path = demo_json(dir.path());
        let config = load_run_config(&path).unwrap();
        assert_eq!(config.datasets[0].csv, dir.path().join("flows.csv"));
        assert_eq!(config.output_directory, dir.path().join("out"));
        config.validate().unwrap();
    }

    #[test]
    fn window_disagreement_is_caught() {
        let dir = tempfile::tempdir().unwrap();
        let path = demo_json(dir.path());
        let mut config = load_run_config(&path).unwrap();
        config.model.window = 9;
        let err = config.validate().unwrap_err();
        assert_eq!(err.exit_code(), 2);
        assert!(err.to_string().contains("model.window"));
    }

    #[test]
    fn missing_csv_is_a_data_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = demo_json(dir.path());
        let mut config = load_run_config(&path).unwrap();
        config.datasets[0].csv = dir.path().join("gone.csv");
        assert_eq!(config.validate().unwrap_err().exit_code(), 2);
    }
}
