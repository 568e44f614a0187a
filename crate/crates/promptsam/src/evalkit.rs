//! Detection metrics, confusion matrices, and time-aware evaluation.
//!
//! Binary metrics follow the usual TP/TN/FP/FN definitions with malware as
//! the positive class. Metrics with a zero denominator are reported as
//! undefined (`None`), never silently as zero. AUT is the trapezoidal
//! average of a metric over chronologically ordered test slices.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("prediction and label lists differ in length: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("empty input")]
    Empty,
    #[error("family id {id} out of range 1..={n}")]
    OutOfRangeId { id: usize, n: usize },
    #[error("confusion matrix has no observations")]
    EmptyMatrix,
    #[error("AUT needs at least two slices, got {0}")]
    TooFewSlices(usize),
}

pub type Result<T> = std::result::Result<T, EvalError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BinaryLabel {
    Malware,
    Benign,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct BinaryCounts {
    pub tp: u64,
    pub tn: u64,
    pub fp: u64,
    pub fn_: u64,
}

impl BinaryCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.tn + self.fp + self.fn_
    }
}

/// Ratios in [0, 1]; `None` marks an undefined (zero-denominator) metric.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub acc: Option<f64>,
    pub pre: Option<f64>,
    pub rec: Option<f64>,
    pub f1: Option<f64>,
    pub fpr: Option<f64>,
    pub fnr: Option<f64>,
    pub tpr: Option<f64>,
    pub tnr: Option<f64>,
}

pub const DRIFT_METRICS: [&str; 6] = ["acc", "pre", "rec", "f1", "fpr", "fnr"];

impl MetricsReport {
    pub fn get(&self, name: &str) -> Option<f64> {
        match name {
            "acc" => self.acc,
            "pre" => self.pre,
            "rec" => self.rec,
            "f1" => self.f1,
            "fpr" => self.fpr,
            "fnr" => self.fnr,
            "tpr" => self.tpr,
            "tnr" => self.tnr,
            _ => None,
        }
    }
}

/// Tally TP/TN/FP/FN with malware as the positive class.
pub fn binary_counts(
    predictions: &[BinaryLabel],
    labels: &[BinaryLabel],
) -> Result<BinaryCounts> {
    if predictions.len() != labels.len() {
        return Err(EvalError::LengthMismatch(predictions.len(), labels.len()));
    }
    if predictions.is_empty() {
        return Err(EvalError::Empty);
    }
    let mut c = BinaryCounts::default();
    for (&p, &l) in predictions.iter().zip(labels) {
        use BinaryLabel::*;
        match (l, p) {
            (Malware, Malware) => c.tp += 1,
            (Benign, Benign) => c.tn += 1,
            (Benign, Malware) => c.fp += 1,
            (Malware, Benign) => c.fn_ += 1,
        }
    }
    Ok(c)
}

fn ratio(num: u64, den: u64) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

pub fn binary_metrics(c: &BinaryCounts) -> MetricsReport {
    let tpr = ratio(c.tp, c.tp + c.fn_);
    let tnr = ratio(c.tn, c.tn + c.fp);
    MetricsReport {
        acc: ratio(c.tp + c.tn, c.total()),
        pre: ratio(c.tp, c.tp + c.fp),
        rec: tpr,
        f1: ratio(2 * c.tp, 2 * c.tp + c.fp + c.fn_),
        fpr: ratio(c.fp, c.fp + c.tn),
        fnr: ratio(c.fn_, c.fn_ + c.tp),
        tpr,
        tnr,
    }
}

/// N x N counts, `C[i][j]` = true family i predicted as family j.
/// Family ids are 1-based.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub n: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(n: usize) -> Self {
        Self {
            n,
            counts: vec![0; n * n],
        }
    }

    pub fn get(&self, true_id: usize, pred_id: usize) -> u64 {
        self.counts[(true_id - 1) * self.n + (pred_id - 1)]
    }

    pub fn add(&mut self, true_id: usize, pred_id: usize) -> Result<()> {
        for id in [true_id, pred_id] {
            if id == 0 || id > self.n {
                return Err(EvalError::OutOfRangeId { id, n: self.n });
            }
        }
        self.counts[(true_id - 1) * self.n + (pred_id - 1)] += 1;
        Ok(())
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn row_total(&self, true_id: usize) -> u64 {
        (1..=self.n).map(|j| self.get(true_id, j)).sum()
    }

    pub fn col_total(&self, pred_id: usize) -> u64 {
        (1..=self.n).map(|i| self.get(i, pred_id)).sum()
    }
}

pub fn confusion(predictions: &[usize], labels: &[usize], n: usize) -> Result<ConfusionMatrix> {
    if predictions.len() != labels.len() {
        return Err(EvalError::LengthMismatch(predictions.len(), labels.len()));
    }
    let mut m = ConfusionMatrix::new(n);
    for (&p, &l) in predictions.iter().zip(labels) {
        m.add(l, p)?;
    }
    Ok(m)
}

/// Diagonal mass over total mass.
pub fn global_accuracy(matrix: &ConfusionMatrix) -> Result<f64> {
    let total = matrix.total();
    if total == 0 {
        return Err(EvalError::EmptyMatrix);
    }
    let diag: u64 = (1..=matrix.n).map(|i| matrix.get(i, i)).sum();
    Ok(diag as f64 / total as f64)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct FamilyPrf {
    pub pre: Option<f64>,
    pub rec: Option<f64>,
    pub f1: Option<f64>,
}

/// One-vs-rest precision/recall/F1 per family (1-based index i at `[i-1]`).
pub fn per_family_prf(matrix: &ConfusionMatrix) -> Vec<FamilyPrf> {
    (1..=matrix.n)
        .map(|i| {
            let diag = matrix.get(i, i);
            let pre = ratio(diag, matrix.col_total(i));
            let rec = ratio(diag, matrix.row_total(i));
            let f1 = match (pre, rec) {
                (Some(p), Some(r)) if p + r > 0.0 => Some(2.0 * p * r / (p + r)),
                (Some(_), Some(_)) => Some(0.0),
                _ => None,
            };
            FamilyPrf { pre, rec, f1 }
        })
        .collect()
}

/// Area Under Time: trapezoidal average of a metric series over uniformly
/// spaced chronological slices. Units follow the input.
pub fn compute_aut(series: &[f64]) -> Result<f64> {
    if series.len() < 2 {
        return Err(EvalError::TooFewSlices(series.len()));
    }
    let n = series.len();
    let sum: f64 = series
        .windows(2)
        .map(|pair| (pair[0] + pair[1]) / 2.0)
        .sum();
    Ok(sum / (n - 1) as f64)
}

/// Per-slice metrics plus AUT per metric.
#[derive(Debug, Clone, Serialize)]
pub struct DriftReport {
    pub slices: Vec<(String, MetricsReport)>,
    /// AUT per metric name; metrics undefined in any slice are omitted.
    pub aut: BTreeMap<String, f64>,
    /// True when the FNR series trends upward (least-squares slope > 0),
    /// i.e. the model misses more malware as time advances.
    pub fnr_rising: bool,
}

/// Evaluate chronologically ordered slices with a caller-supplied scorer and
/// compute AUT over {acc, pre, rec, f1, fpr, fnr}.
pub fn drift_protocol<D>(
    mut evaluate: impl FnMut(&D) -> MetricsReport,
    slices: &[(String, D)],
) -> Result<DriftReport> {
    if slices.len() < 2 {
        return Err(EvalError::TooFewSlices(slices.len()));
    }
    let scored: Vec<(String, MetricsReport)> = slices
        .iter()
        .map(|(label, data)| (label.clone(), evaluate(data)))
        .collect();
    let mut aut = BTreeMap::new();
    for metric in DRIFT_METRICS {
        let series: Vec<f64> = scored
            .iter()
            .filter_map(|(_, r)| r.get(metric))
            .collect();
        if series.len() == scored.len() {
            aut.insert(metric.to_owned(), compute_aut(&series)?);
        }
    }
    let fnr: Vec<f64> = scored.iter().filter_map(|(_, r)| r.fnr).collect();
    Ok(DriftReport {
        fnr_rising: slope(&fnr) > 0.0,
        slices: scored,
        aut,
    })
}

fn slope(series: &[f64]) -> f64 {
    let n = series.len();
    if n < 2 {
        return 0.0;
    }
    let xm = (n - 1) as f64 / 2.0;
    let ym: f64 = series.iter().sum::<f64>() / n as f64;
    let mut num = 0.0;
    let mut den = 0.0;
    for (i, &y) in series.iter().enumerate() {
        let dx = i as f64 - xm;
        num += dx * (y - ym);
        den += dx * dx;
    }
    num / den
}
