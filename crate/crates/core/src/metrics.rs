//! Confusion counts and the derived binary detection metrics.
//!
//! Attack is the positive class throughout. Every ratio defines 0/0 as 0 so
//! that degenerate tallies (no positives, no negatives) stay well-defined
//! instead of turning into NaN.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("prediction and label slices differ in length: {predictions} vs {labels}")]
    LengthMismatch { predictions: usize, labels: usize },

    #[error("metrics require at least one example")]
    Empty,

    #[error("labels must be 0 or 1, got {value} at index {index}")]
    NotBinary { value: f64, index: usize },
}

/// Raw 2×2 tally. Attack (label 1) is positive.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub true_positives: u64,
    pub true_negatives: u64,
    pub false_positives: u64,
    pub false_negatives: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.true_positives + self.true_negatives + self.false_positives + self.false_negatives
    }

    /// The matrix as rows `[actual benign, actual attack]` ×
    /// columns `[predicted benign, predicted attack]`.
    pub fn matrix(&self) -> [[u64; 2]; 2] {
        [
            [self.true_negatives, self.false_positives],
            [self.false_negatives, self.true_positives],
        ]
    }
}

/// Derived metrics next to the counts they came from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub counts: ConfusionCounts,
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub false_alarm_rate: f64,
    pub detection_rate: f64,
}

/// Tallies binary predictions against labels.
pub fn confusion(predictions: &[u8], labels: &[u8]) -> Result<ConfusionCounts, MetricsError> {
    if predictions.len() != labels.len() {
        return Err(MetricsError::LengthMismatch {
            predictions: predictions.len(),
            labels: labels.len(),
        });
    }
    if predictions.is_empty() {
        return Err(MetricsError::Empty);
    }
    let mut c = ConfusionCounts::default();
    for (i, (&p, &y)) in predictions.iter().zip(labels).enumerate() {
        if p > 1 {
            return Err(MetricsError::NotBinary { value: p as f64, index: i });
        }
        if y > 1 {
            return Err(MetricsError::NotBinary { value: y as f64, index: i });
        }
        match (p, y) {
            (1, 1) => c.true_positives += 1,
            (0, 0) => c.true_negatives += 1,
            (1, 0) => c.false_positives += 1,
            (0, 1) => c.false_negatives += 1,
            _ => unreachable!(),
        }
    }
    Ok(c)
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Derives the full report from a tally.
pub fn derive(counts: ConfusionCounts) -> Result<MetricsReport, MetricsError> {
    if counts.total() == 0 {
        return Err(MetricsError::Empty);
    }
    let tp = counts.true_positives;
    let tn = counts.true_negatives;
    let fp = counts.false_positives;
    let fn_ = counts.false_negatives;
    Ok(MetricsReport {
        counts,
        accuracy: ratio(tp + tn, counts.total()),
        precision: ratio(tp, tp + fp),
        recall: ratio(tp, tp + fn_),
        f1: ratio(2 * tp, 2 * tp + fp + fn_),
        false_alarm_rate: ratio(fp, fp + tn),
        detection_rate: ratio(tp, tp + fn_),
    })
}

/// Thresholds probabilities into class predictions. Ties go to attack:
/// `p == threshold` predicts 1.
pub fn threshold_probs(probs: &[f64], threshold: f64) -> Vec<u8> {
    probs.iter().map(|&p| u8::from(p >= threshold)).collect()
}

const METRIC_COLUMNS: [&str; 10] = [
    "accuracy",
    "precision",
    "recall",
    "f1",
    "false_alarm_rate",
    "detection_rate",
    "true_positives",
    "true_negatives",
    "false_positives",
    "false_negatives",
];

/// Header line for [`metrics_csv_row`].
pub fn metrics_csv_header() -> String {
    METRIC_COLUMNS.join(",")
}

/// One CSV row matching [`metrics_csv_header`] column for column.
pub fn metrics_csv_row(report: &MetricsReport) -> String {
    format!(
        "{},{},{},{},{},{},{},{},{},{}",
        report.accuracy,
        report.precision,
        report.recall,
        report.f1,
        report.false_alarm_rate,
        report.detection_rate,
        report.counts.true_positives,
        report.counts.true_negatives,
        report.counts.false_positives,
        report.counts.false_negatives,
    )
}

/// Confusion matrix as labelled CSV, rows = actual, columns = predicted.
pub fn confusion_csv(counts: &ConfusionCounts) -> String {
    let m = counts.matrix();
    format!(
        ",predicted_benign,predicted_attack\n\
         actual_benign,{},{}\n\
         actual_attack,{},{}\n",
        m[0][0], m[0][1], m[1][0], m[1][1]
    )
}

/// Human-readable summary block.
pub fn render_text(report: &MetricsReport) -> String {
    let c = &report.counts;
    format!(
        "examples: {}\n\
         accuracy: {:.4}\n\
         precision: {:.4}\n\
         recall / detection rate: {:.4}\n\
         f1: {:.4}\n\
         false alarm rate: {:.4}\n\
         confusion: tp={} tn={} fp={} fn={}\n",
        c.total(),
        report.accuracy,
        report.precision,
        report.recall,
        report.f1,
        report.false_alarm_rate,
        c.true_positives,
        c.true_negatives,
        c.false_positives,
        c.false_negatives,
    )
}
