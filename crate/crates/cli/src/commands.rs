//! The eight subcommands. Each one loads and validates the run config,
//! does its work, writes its artifacts into the output directory, and
//! finishes with a manifest naming every file it read and wrote.

use std::path::{Path, PathBuf};

use flowsentry::bench::{run_bench, RealClock};
use flowsentry::dataset::{ingest_csv, DatasetSpec};
use flowsentry::metrics::{render_text, MetricsReport};
use flowsentry::model::{load_checkpoint, save_checkpoint, Model, WindowBatch};
use flowsentry::preprocess::{make_windows, transform, PreprocessorState};
use flowsentry::training::{
    epoch_log_jsonl, eval_loss_and_metrics, grid_csv, grid_search, grid_skipped_csv,
};
use serde::{Deserialize, Serialize};

use crate::config::{load_run_config, RunConfig};
use crate::error::CliError;
use crate::manifest::RunManifest;
use crate::pipeline;

/// Tie `p = threshold` counts as attack, matching the evaluation loop.
pub const DEFAULT_THRESHOLD: f64 = 0.5;

/// Windows forwarded per graph while scoring; bounds peak memory.
const PREDICT_CHUNK: usize = 256;

/// The shape of `metrics.json` (from `train`, with `best_epoch`) and
/// `eval_metrics.json` (from `eval`, without).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsDocument {
    pub threshold: f64,
    pub eval_loss: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub best_epoch: Option<usize>,
    pub metrics: MetricsReport,
}

fn load_validated(config_path: &Path) -> Result<(RunConfig, Vec<DatasetSpec>), CliError> {
    let cfg = load_run_config(config_path)?;
    let specs = cfg.validate()?;
    Ok((cfg, specs))
}

/// The directory every artifact lands in: `--out` wins over the config.
fn out_dir(cfg: &RunConfig, out_override: Option<&Path>) -> Result<PathBuf, CliError> {
    let dir = out_override
        .map(Path::to_path_buf)
        .unwrap_or_else(|| cfg.output_directory.clone());
    std::fs::create_dir_all(&dir).map_err(|e| CliError::write(&dir, e))?;
    Ok(dir)
}

fn write_text(dir: &Path, name: &str, text: &str) -> Result<(), CliError> {
    let path = dir.join(name);
    std::fs::write(&path, text).map_err(|e| CliError::write(&path, e))
}

fn write_json<T: Serialize>(dir: &Path, name: &str, value: &T) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value)
        .map_err(|e| CliError::Runtime(format!("serializing {name}: {e}")))?;
    write_text(dir, name, &text)
}

/// A manifest preloaded with the dataset files and data-path seeds every
/// pipeline command consumes.
fn data_manifest(
    command: &str,
    config_path: &Path,
    cfg: &RunConfig,
) -> Result<RunManifest, CliError> {
    let mut manifest = RunManifest::new(command, config_path)?;
    manifest.seed("fusion", cfg.fusion_seed);
    manifest.seed("split", cfg.split.seed);
    for entry in &cfg.datasets {
        manifest.input(&entry.spec)?;
        manifest.input(&entry.csv)?;
    }
    Ok(manifest)
}

/// `validate`: full config and file check, no side effects.
pub fn validate(config_path: &Path) -> Result<(), CliError> {
    let (cfg, specs) = load_validated(config_path)?;
    let names: Vec<&str> = specs.iter().map(|s| s.name.as_str()).collect();
    println!(
        "OK: {} dataset(s) [{}], window {}, {} -> {}, output {}",
        specs.len(),
        names.join(", "),
        cfg.preprocess.window,
        cfg.model.input_encoding,
        cfg.model.head,
        cfg.output_directory.display()
    );
    Ok(())
}

/// `preprocess`: fit on the training split and persist the fitted state.
pub fn preprocess(config_path: &Path, out_override: Option<&Path>) -> Result<(), CliError> {
    let (cfg, specs) = load_validated(config_path)?;
    let out = out_dir(&cfg, out_override)?;
    let data = pipeline::prepare(&cfg, &specs)?;

    write_json(&out, "preprocessor.json", &data.state)?;
    let mut manifest = data_manifest("preprocess", config_path, &cfg)?;
    manifest.artifact(&out, "preprocessor.json")?;
    manifest.write(&out)?;

    println!(
        "fitted on {} train rows ({} eval rows held out); feature width {}",
        data.train_rows, data.eval_rows, data.state.feature_width
    );
    Ok(())
}

/// `train`: one full run — checkpoint, epoch logs, metrics, preprocessor.
pub fn train(
    config_path: &Path,
    out_override: Option<&Path>,
    seed_override: Option<u64>,
) -> Result<(), CliError> {
    let (mut cfg, specs) = load_validated(config_path)?;
    if let Some(seed) = seed_override {
        cfg.train.seed = seed;
    }
    let out = out_dir(&cfg, out_override)?;
    let data = pipeline::prepare(&cfg, &specs)?;

    let model = Model::build(cfg.model.clone(), data.layout.clone())?;
    let clock = RealClock::new();
    let outcome = flowsentry::training::train(
        model,
        &data.train_windows,
        &data.eval_windows,
        &cfg.train,
        &clock,
    )?;

    let state_hash = data.state.content_hash()?;
    save_checkpoint(&out.join("model.fsnt"), &outcome.model, &state_hash)?;
    write_json(&out, "preprocessor.json", &data.state)?;
    write_text(&out, "epochs.jsonl", &epoch_log_jsonl(&outcome.epochs))?;

    let best = &outcome.epochs[outcome.best_epoch - 1];
    let doc = MetricsDocument {
        threshold: DEFAULT_THRESHOLD,
        eval_loss: best.eval_loss,
        best_epoch: Some(outcome.best_epoch),
        metrics: best.eval_metrics.clone(),
    };
    write_json(&out, "metrics.json", &doc)?;

    let mut manifest = data_manifest("train", config_path, &cfg)?;
    manifest.seed("model", cfg.model.seed);
    manifest.seed("train", cfg.train.seed);
    manifest.artifact(&out, "preprocessor.json")?;
    manifest.artifact(&out, "model.fsnt")?;
    manifest.artifact(&out, "epochs.jsonl")?;
    manifest.artifact(&out, "metrics.json")?;
    manifest.write(&out)?;

    println!(
        "trained {} epoch(s), kept epoch {}: eval loss {:.6}, F1 {:.4}",
        outcome.epochs.len(),
        outcome.best_epoch,
        best.eval_loss,
        best.eval_metrics.f1
    );
    Ok(())
}

/// `grid`: exhaustive search over the config's grid section.
pub fn grid(
    config_path: &Path,
    out_override: Option<&Path>,
    seed_override: Option<u64>,
    threads: usize,
) -> Result<(), CliError> {
    let (mut cfg, specs) = load_validated(config_path)?;
    if let Some(seed) = seed_override {
        cfg.train.seed = seed;
    }
    if threads == 0 {
        return Err(CliError::Data("--threads must be at least 1".into()));
    }
    let grid_spec = cfg
        .grid
        .clone()
        .ok_or_else(|| CliError::Data("run config has no grid section".into()))?;
    let out = out_dir(&cfg, out_override)?;
    let data = pipeline::prepare(&cfg, &specs)?;

    let clock = RealClock::new();
    let result = grid_search(
        &grid_spec,
        &cfg.model,
        &data.layout,
        &data.train_windows,
        &data.eval_windows,
        &cfg.train,
        &cfg.bench,
        &clock,
        threads,
    )?;

    write_text(&out, "grid.csv", &grid_csv(&result))?;
    write_text(&out, "grid_skipped.csv", &grid_skipped_csv(&result))?;

    let mut manifest = data_manifest("grid", config_path, &cfg)?;
    manifest.seed("model", cfg.model.seed);
    manifest.seed("train", cfg.train.seed);
    manifest.artifact(&out, "grid.csv")?;
    manifest.artifact(&out, "grid_skipped.csv")?;
    manifest.write(&out)?;

    println!(
        "grid: {} cell(s), {} trained, {} skipped",
        result.cells,
        result.rows.len(),
        result.skipped.len()
    );
    Ok(())
}

/// `eval`: rebuild the eval split from the config and score the stored
/// checkpoint on it. With the default threshold this reproduces the
/// training run's reported metrics exactly.
pub fn eval(
    config_path: &Path,
    out_override: Option<&Path>,
    threshold: f64,
) -> Result<(), CliError> {
    if !(0.0..=1.0).contains(&threshold) {
        return Err(CliError::Data(format!(
            "--threshold must lie in [0, 1], got {threshold}"
        )));
    }
    let (cfg, specs) = load_validated(config_path)?;
    let out = out_dir(&cfg, out_override)?;
    let ckpt_path = out.join("model.fsnt");
    if !ckpt_path.is_file() {
        return Err(CliError::Data(format!(
            "no checkpoint at {}; run `train` first",
            ckpt_path.display()
        )));
    }

    let data = pipeline::prepare(&cfg, &specs)?;
    let checkpoint = load_checkpoint(&ckpt_path)?;
    if let Some(msg) = checkpoint.hash_mismatch(&data.state.content_hash()?) {
        return Err(CliError::Data(msg));
    }

    let (eval_loss, metrics) =
        eval_loss_and_metrics(&checkpoint.model, &data.eval_windows, threshold)?;
    let doc = MetricsDocument {
        threshold,
        eval_loss,
        best_epoch: None,
        metrics: metrics.clone(),
    };
    write_json(&out, "eval_metrics.json", &doc)?;

    let mut manifest = data_manifest("eval", config_path, &cfg)?;
    manifest.input(&ckpt_path)?;
    manifest.artifact(&out, "eval_metrics.json")?;
    manifest.write(&out)?;

    print!("{}", render_text(&metrics));
    Ok(())
}

/// `bench`: throughput of the stored checkpoint (or a fresh build) on the
/// training windows, with the real clock.
pub fn bench(config_path: &Path, out_override: Option<&Path>) -> Result<(), CliError> {
    let (cfg, specs) = load_validated(config_path)?;
    let out = out_dir(&cfg, out_override)?;
    let data = pipeline::prepare(&cfg, &specs)?;

    let ckpt_path = out.join("model.fsnt");
    let mut manifest = data_manifest("bench", config_path, &cfg)?;
    let model = if ckpt_path.is_file() {
        let checkpoint = load_checkpoint(&ckpt_path)?;
        // Throughput doesn't depend on fit, so a stale preprocessor only
        // warrants a warning here.
        if let Some(msg) = checkpoint.hash_mismatch(&data.state.content_hash()?) {
            eprintln!("warning: {msg}");
        }
        manifest.input(&ckpt_path)?;
        checkpoint.model
    } else {
        Model::build(cfg.model.clone(), data.layout.clone())?
    };

    let report = run_bench(&model, &data.train_windows, &cfg.bench, &RealClock::new())?;
    write_json(&out, "bench.json", &report)?;
    manifest.artifact(&out, "bench.json")?;
    manifest.write(&out)?;

    println!(
        "train {:.1} flows/s, inference {:.1} flows/s ({} outlier batch(es))",
        report.train_flows_per_sec,
        report.inference_flows_per_sec,
        report.outlier_batch_indices.len()
    );
    Ok(())
}

/// `predict`: score a flow CSV with the stored preprocessor + checkpoint,
/// one verdict row per input flow, input order preserved.
pub fn predict(
    config_path: &Path,
    input: &Path,
    out_override: Option<&Path>,
    threshold: f64,
) -> Result<(), CliError> {
    if !(0.0..=1.0).contains(&threshold) {
        return Err(CliError::Data(format!(
            "--threshold must lie in [0, 1], got {threshold}"
        )));
    }
    let (cfg, _) = load_validated(config_path)?;
    let out = out_dir(&cfg, out_override)?;
    let state_path = out.join("preprocessor.json");
    let ckpt_path = out.join("model.fsnt");
    for required in [&state_path, &ckpt_path] {
        if !required.is_file() {
            return Err(CliError::Data(format!(
                "missing {}; run `train` into this output directory first",
                required.display()
            )));
        }
    }

    let state_text =
        std::fs::read_to_string(&state_path).map_err(|e| CliError::read(&state_path, e))?;
    let state: PreprocessorState = serde_json::from_str(&state_text).map_err(|e| {
        CliError::Data(format!("malformed preprocessor state {}: {e}", state_path.display()))
    })?;
    let checkpoint = load_checkpoint(&ckpt_path)?;
    if let Some(msg) = checkpoint.hash_mismatch(&state.content_hash()?) {
        return Err(CliError::Data(msg));
    }

    let spec = cfg.primary_spec()?;
    let table = ingest_csv(input, &spec)?;
    let encoded = transform(&table, &state)?;
    let windows = make_windows(&encoded, cfg.preprocess.window)?;

    let mut csv = String::from("row,probability,verdict\n");
    for (chunk_index, chunk) in windows.chunks(PREDICT_CHUNK).enumerate() {
        let batch = WindowBatch::from_slice(chunk)?;
        let probs = checkpoint.model.forward_batch(&batch)?;
        for (offset, p) in probs.iter().enumerate() {
            let verdict = if *p >= threshold { "attack" } else { "benign" };
            csv.push_str(&format!(
                "{},{p},{verdict}\n",
                chunk_index * PREDICT_CHUNK + offset
            ));
        }
    }
    write_text(&out, "predictions.csv", &csv)?;

    let mut manifest = RunManifest::new("predict", config_path)?;
    manifest.input(&cfg.datasets[0].spec)?;
    manifest.input(input)?;
    manifest.input(&state_path)?;
    manifest.input(&ckpt_path)?;
    manifest.artifact(&out, "predictions.csv")?;
    manifest.write(&out)?;

    println!("scored {} flow(s) at threshold {threshold}", windows.len());
    Ok(())
}

/// `report`: render stored results as markdown — the single-run confusion
/// matrix and, when a grid ran, the best F1 per classification head.
pub fn report(config_path: &Path, out_override: Option<&Path>) -> Result<(), CliError> {
    // Report only re-renders stored artifacts, so the raw datasets need not
    // still exist; skip the full validation pass.
    let cfg = load_run_config(config_path)?;
    let out = out_dir(&cfg, out_override)?;
    let metrics_path = out.join("metrics.json");
    let grid_path = out.join("grid.csv");
    if !metrics_path.is_file() && !grid_path.is_file() {
        return Err(CliError::Data(format!(
            "nothing to report in {}: no metrics.json or grid.csv; run `train` or `grid` first",
            out.display()
        )));
    }

    let mut manifest = RunManifest::new("report", config_path)?;
    let mut md = String::from("# Detection report\n");

    if metrics_path.is_file() {
        let text = std::fs::read_to_string(&metrics_path)
            .map_err(|e| CliError::read(&metrics_path, e))?;
        let doc: MetricsDocument = serde_json::from_str(&text).map_err(|e| {
            CliError::Data(format!("malformed {}: {e}", metrics_path.display()))
        })?;
        manifest.input(&metrics_path)?;
        md.push_str(&single_run_section(&doc));
    }
    if grid_path.is_file() {
        manifest.input(&grid_path)?;
        md.push_str(&head_comparison_section(&grid_path)?);
    }

    write_text(&out, "report.md", &md)?;
    manifest.artifact(&out, "report.md")?;
    manifest.write(&out)?;

    println!("wrote {}", out.join("report.md").display());
    Ok(())
}

fn single_run_section(doc: &MetricsDocument) -> String {
    let m = doc.metrics.counts.matrix();
    let epoch = doc
        .best_epoch
        .map(|e| format!(" (best epoch {e})"))
        .unwrap_or_default();
    format!(
        "\n## Single run{epoch}\n\n\
         | metric | value |\n|---|---|\n\
         | threshold | {} |\n\
         | eval loss | {:.6} |\n\
         | accuracy | {:.4} |\n\
         | precision | {:.4} |\n\
         | recall / detection rate | {:.4} |\n\
         | F1 | {:.4} |\n\
         | false alarm rate | {:.4} |\n\n\
         | | predicted benign | predicted attack |\n|---|---|---|\n\
         | actual benign | {} | {} |\n\
         | actual attack | {} | {} |\n",
        doc.threshold,
        doc.eval_loss,
        doc.metrics.accuracy,
        doc.metrics.precision,
        doc.metrics.recall,
        doc.metrics.f1,
        doc.metrics.false_alarm_rate,
        m[0][0],
        m[0][1],
        m[1][0],
        m[1][1],
    )
}

/// Per classification head, the grid row with the best F1 (ties: first in
/// cell order), sorted best-first.
fn head_comparison_section(grid_path: &Path) -> Result<String, CliError> {
    let mut reader = csv::Reader::from_path(grid_path)
        .map_err(|e| CliError::Data(format!("grid.csv: {e}")))?;
    let headers = reader
        .headers()
        .map_err(|e| CliError::Data(format!("grid.csv: {e}")))?
        .clone();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| CliError::Data(format!("grid.csv lacks a `{name}` column")))
    };
    let (head_col, f1_col) = (col("head")?, col("f1")?);
    let (enc_col, cell_col) = (col("input_encoding")?, col("cell")?);
    let (acc_col, far_col) = (col("accuracy")?, col("false_alarm_rate")?);

    let mut best: Vec<(String, f64, String, String, String, String)> = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| CliError::Data(format!("grid.csv: {e}")))?;
        let field = |i: usize| record.get(i).unwrap_or("").to_string();
        let f1: f64 = field(f1_col)
            .parse()
            .map_err(|e| CliError::Data(format!("grid.csv f1 column: {e}")))?;
        let head = field(head_col);
        match best.iter_mut().find(|(h, ..)| *h == head) {
            Some(entry) if f1 > entry.1 => {
                *entry = (head, f1, field(cell_col), field(enc_col), field(acc_col), field(far_col));
            }
            Some(_) => {}
            None => best.push((head, f1, field(cell_col), field(enc_col), field(acc_col), field(far_col))),
        }
    }
    best.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap_or(std::cmp::Ordering::Equal));

    let mut md = String::from(
        "\n## Best F1 by classification head\n\n\
         | head | best F1 | cell | input encoding | accuracy | false alarm rate |\n\
         |---|---|---|---|---|---|\n",
    );
    for (head, f1, cell, enc, acc, far) in &best {
        md.push_str(&format!("| {head} | {f1} | {cell} | {enc} | {acc} | {far} |\n"));
    }
    Ok(md)
}
