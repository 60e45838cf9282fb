//! Flow-window transformer pipeline for binary DDoS detection on IoT
//! network-flow records.
//!
//! The crate is organised around the stages of the pipeline:
//!
//! * [`dataset`] — CSV ingestion against a declarative dataset spec, fusion of
//!   per-capture files, and the deterministic train/eval split.
//! * [`preprocess`] — categorical top-N encoding, `log1p` + min-max scaling of
//!   numericals, and the sliding-window view the models consume.
//! * [`autograd`] — a tape-based reverse-mode engine over dense `f64` tensors.
//!   Everything the models need (matmul, softmax, layer norm, fused windowed
//!   attention, …) is a tape op with a hand-derived backward.
//! * [`model`] — the configurable transformer (encoder or decoder blocks, four
//!   input encodings, six classification heads), an LSTM baseline, and a
//!   self-describing binary checkpoint format.
//! * [`training`] — Adam training loop with early stopping, evaluation, and
//!   the hyperparameter grid search.
//! * [`metrics`] — confusion counts and the derived detection metrics.
//! * [`bench`] — throughput measurement behind an injectable clock.

pub mod autograd;
pub mod bench;
pub mod dataset;
pub mod metrics;
pub mod model;
pub mod preprocess;
pub mod training;
