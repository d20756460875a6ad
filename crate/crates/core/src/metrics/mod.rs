//! Classification metrics over ordinal verge classes.

mod export;
mod predictions;

pub use export::{export_report, ReportFormat};
pub use predictions::{read_predictions, write_predictions, PredictionRow};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error("{truth} true labels but {pred} predictions")]
    LengthMismatch { truth: usize, pred: usize },
    #[error("no samples")]
    Empty,
    #[error("label {label} outside 1..={k}")]
    LabelOutOfRange { label: u8, k: usize },
    #[error("confusion matrix rows must all have {0} entries")]
    NotSquare(usize),
    #[error("confusion matrix has zero total")]
    ZeroTotal,
    #[error("sample {sample}: expected {expected} scores, got {got}")]
    ScoreWidth { sample: usize, expected: usize, got: usize },
    #[error("sample {sample}: non-finite score")]
    NonFiniteScore { sample: usize },
    #[error("{0} class names for {1} classes")]
    ClassNames(usize, usize),
    #[error("predictions line {line}: {message}")]
    Predictions { line: usize, message: String },
}

/// Square count matrix; rows are true classes, columns predicted.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    k: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn zeros(k: usize) -> Self {
        ConfusionMatrix { k, counts: vec![0; k * k] }
    }

    pub fn from_rows(rows: &[Vec<u64>]) -> Result<Self, MetricsError> {
        let k = rows.len();
        if rows.iter().any(|r| r.len() != k) {
            return Err(MetricsError::NotSquare(k));
        }
        Ok(ConfusionMatrix {
            k,
            counts: rows.concat(),
        })
    }

    pub fn num_classes(&self) -> usize {
        self.k
    }

    /// Count for 0-based true class `t` and predicted class `p`.
    pub fn get(&self, t: usize, p: usize) -> u64 {
        self.counts[t * self.k + p]
    }

    pub fn rows(&self) -> Vec<Vec<u64>> {
        self.counts.chunks(self.k.max(1)).map(<[u64]>::to_vec).collect()
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.k).map(|i| self.get(i, i)).sum()
    }

    pub fn row_sum(&self, t: usize) -> u64 {
        (0..self.k).map(|p| self.get(t, p)).sum()
    }

    pub fn col_sum(&self, p: usize) -> u64 {
        (0..self.k).map(|t| self.get(t, p)).sum()
    }

    /// Same matrix with classes reordered: new class `i` is old class `order[i]`.
    pub fn permuted(&self, order: &[usize]) -> Self {
        let mut out = Self::zeros(self.k);
        for (i, &oi) in order.iter().enumerate() {
            for (j, &oj) in order.iter().enumerate() {
                out.counts[i * self.k + j] = self.get(oi, oj);
            }
        }
        out
    }
}

/// Tallies 1-based labels into a `k`-class confusion matrix.
pub fn confusion(y_true: &[u8], y_pred: &[u8], k: usize) -> Result<ConfusionMatrix, MetricsError> {
    if y_true.len() != y_pred.len() {
        return Err(MetricsError::LengthMismatch {
            truth: y_true.len(),
            pred: y_pred.len(),
        });
    }
    if y_true.is_empty() {
        return Err(MetricsError::Empty);
    }
    let mut cm = ConfusionMatrix::zeros(k);
    for (&t, &p) in y_true.iter().zip(y_pred) {
        for label in [t, p] {
            if label == 0 || label as usize > k {
                return Err(MetricsError::LabelOutOfRange { label, k });
            }
        }
        cm.counts[(t as usize - 1) * k + (p as usize - 1)] += 1;
    }
    Ok(cm)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KappaWeighting {
    Unweighted,
    Linear,
    #[default]
    Quadratic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub name: String,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// Recall as a percentage.
    pub accuracy_pct: f64,
    pub support: u64,
    /// Nothing was predicted as this class, so precision is reported as 0.
    pub precision_undefined: bool,
    /// The class has no samples, so recall is reported as 0.
    pub recall_undefined: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Averages {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub per_class: Vec<ClassMetrics>,
    pub macro_avg: Averages,
    pub weighted_avg: Averages,
    pub overall_accuracy_pct: f64,
    pub kappa: f64,
    pub kappa_weighting: KappaWeighting,
    pub total_support: u64,
    pub confusion: ConfusionMatrix,
}

/// Unweighted mean.
pub fn macro_average(values: &[f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    values.iter().sum::<f64>() / values.len() as f64
}

/// Support-weighted mean.
pub fn weighted_average(values: &[f64], supports: &[u64]) -> f64 {
    let total: u64 = supports.iter().sum();
    if total == 0 {
        return 0.0;
    }
    values.iter().zip(supports).map(|(v, s)| v * *s as f64).sum::<f64>() / total as f64
}

fn ratio(num: u64, den: u64) -> (f64, bool) {
    if den == 0 {
        (0.0, true)
    } else {
        (num as f64 / den as f64, false)
    }
}

/// Cohen's kappa with the given disagreement weights.
///
/// When the expected disagreement is zero (truth and predictions are the same
/// constant class) the result is 1.
pub fn cohen_kappa(cm: &ConfusionMatrix, weighting: KappaWeighting) -> Result<f64, MetricsError> {
    let k = cm.num_classes();
    let total = cm.total() as f64;
    if total == 0.0 {
        return Err(MetricsError::ZeroTotal);
    }
    let span = (k.max(2) - 1) as f64;
    let weight = |i: usize, j: usize| {
        let d = (i as f64 - j as f64).abs();
        match weighting {
            KappaWeighting::Unweighted => f64::from(u8::from(i != j)),
            KappaWeighting::Linear => d / span,
            KappaWeighting::Quadratic => (d / span).powi(2),
        }
    };
    let rows: Vec<f64> = (0..k).map(|i| cm.row_sum(i) as f64).collect();
    let cols: Vec<f64> = (0..k).map(|j| cm.col_sum(j) as f64).collect();
    let (mut observed, mut expected) = (0.0, 0.0);
    for i in 0..k {
        for j in 0..k {
            let w = weight(i, j);
            observed += w * cm.get(i, j) as f64 / total;
            expected += w * rows[i] * cols[j] / (total * total);
        }
    }
    if expected == 0.0 {
        return Ok(if observed == 0.0 { 1.0 } else { 0.0 });
    }
    Ok(1.0 - observed / expected)
}

/// Full metric suite for `cm`. Classes are named `1..=k` unless `class_names` is given.
pub fn report(
    cm: &ConfusionMatrix,
    weighting: KappaWeighting,
    class_names: Option<&[String]>,
) -> Result<EvaluationReport, MetricsError> {
    let k = cm.num_classes();
    let total = cm.total();
    if total == 0 {
        return Err(MetricsError::ZeroTotal);
    }
    if let Some(names) = class_names {
        if names.len() != k {
            return Err(MetricsError::ClassNames(names.len(), k));
        }
    }
    let per_class: Vec<ClassMetrics> = (0..k)
        .map(|c| {
            let tp = cm.get(c, c);
            let (precision, precision_undefined) = ratio(tp, cm.col_sum(c));
            let (recall, recall_undefined) = ratio(tp, cm.row_sum(c));
            let f1 = if precision + recall == 0.0 {
                0.0
            } else {
                2.0 * precision * recall / (precision + recall)
            };
            ClassMetrics {
                name: class_names.map_or_else(|| (c + 1).to_string(), |n| n[c].clone()),
                precision,
                recall,
                f1,
                accuracy_pct: recall * 100.0,
                support: cm.row_sum(c),
                precision_undefined,
                recall_undefined,
            }
        })
        .collect();
    let pick = |f: fn(&ClassMetrics) -> f64| per_class.iter().map(f).collect::<Vec<_>>();
    let supports: Vec<u64> = per_class.iter().map(|c| c.support).collect();
    let (p, r, f) = (pick(|c| c.precision), pick(|c| c.recall), pick(|c| c.f1));
    Ok(EvaluationReport {
        macro_avg: Averages {
            precision: macro_average(&p),
            recall: macro_average(&r),
            f1: macro_average(&f),
        },
        weighted_avg: Averages {
            precision: weighted_average(&p, &supports),
            recall: weighted_average(&r, &supports),
            f1: weighted_average(&f, &supports),
        },
        overall_accuracy_pct: cm.trace() as f64 / total as f64 * 100.0,
        kappa: cohen_kappa(cm, weighting)?,
        kappa_weighting: weighting,
        total_support: total,
        per_class,
        confusion: cm.clone(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrPoint {
    pub threshold: f64,
    pub recall: f64,
    pub precision: f64,
    /// Highest precision among points with at least this recall.
    pub interpolated_precision: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrCurve {
    pub class: u8,
    pub points: Vec<PrPoint>,
}

/// One-vs-rest precision/recall points for each class.
///
/// Thresholds are the distinct observed scores, highest first; a sample counts
/// as predicted positive when its score is at or above the threshold.
pub fn pr_points(y_true: &[u8], scores: &[Vec<f64>], k: usize) -> Result<Vec<PrCurve>, MetricsError> {
    if y_true.len() != scores.len() {
        return Err(MetricsError::LengthMismatch {
            truth: y_true.len(),
            pred: scores.len(),
        });
    }
    if y_true.is_empty() {
        return Err(MetricsError::Empty);
    }
    for (i, (t, s)) in y_true.iter().zip(scores).enumerate() {
        if *t == 0 || *t as usize > k {
            return Err(MetricsError::LabelOutOfRange { label: *t, k });
        }
        if s.len() != k {
            return Err(MetricsError::ScoreWidth {
                sample: i,
                expected: k,
                got: s.len(),
            });
        }
        if s.iter().any(|v| !v.is_finite()) {
            return Err(MetricsError::NonFiniteScore { sample: i });
        }
    }
    let mut curves = Vec::with_capacity(k);
    for c in 0..k {
        let mut ranked: Vec<(f64, bool)> = scores
            .iter()
            .zip(y_true)
            .map(|(s, t)| (s[c], *t as usize == c + 1))
            .collect();
        ranked.sort_by(|a, b| b.0.total_cmp(&a.0));
        let positives = ranked.iter().filter(|(_, p)| *p).count();
        let mut points = Vec::new();
        let (mut tp, mut fp) = (0usize, 0usize);
        let mut i = 0;
        while i < ranked.len() {
            let threshold = ranked[i].0;
            while i < ranked.len() && ranked[i].0 == threshold {
                if ranked[i].1 {
                    tp += 1;
                } else {
                    fp += 1;
                }
                i += 1;
            }
            let recall = if positives == 0 { 0.0 } else { tp as f64 / positives as f64 };
            points.push(PrPoint {
                threshold,
                recall,
                precision: tp as f64 / (tp + fp) as f64,
                interpolated_precision: 0.0,
            });
        }
        let mut best = 0.0f64;
        for p in points.iter_mut().rev() {
            best = best.max(p.precision);
            p.interpolated_precision = best;
        }
        // recall is non-decreasing; points sharing a recall share the maximum
        for i in 1..points.len() {
            if points[i].recall == points[i - 1].recall {
                points[i].interpolated_precision = points[i - 1].interpolated_precision;
            }
        }
        curves.push(PrCurve {
            class: c as u8 + 1,
            points,
        });
    }
    Ok(curves)
}
