//! Evaluation metrics: confusion matrices, per-class recall/precision,
//! sensitivity/specificity, ROC/AUC, and quadratic weighted kappa.
//!
//! Metrics with a 0/0 denominator are reported as `None` rather than being
//! silently coerced to zero; small synthetic test sets hit those cases.

use crate::error::{Error, Result};
use serde::Serialize;

/// Row `i`, column `j` counts samples of true class `i` predicted as `j`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ConfusionMatrix {
    pub classes: usize,
    pub counts: Vec<usize>,
}

impl ConfusionMatrix {
    pub fn from_labels(truths: &[usize], predictions: &[usize], classes: usize) -> Result<Self> {
        if truths.len() != predictions.len() {
            return Err(Error::shape(
                "confusion",
                format!("{} truths vs {} predictions", truths.len(), predictions.len()),
            ));
        }
        let mut counts = vec![0usize; classes * classes];
        for (&t, &p) in truths.iter().zip(predictions) {
            if t >= classes || p >= classes {
                return Err(Error::InvalidArgument(format!(
                    "label ({t}, {p}) out of range for {classes} classes"
                )));
            }
            counts[t * classes + p] += 1;
        }
        Ok(ConfusionMatrix { classes, counts })
    }

    pub fn get(&self, truth: usize, pred: usize) -> usize {
        self.counts[truth * self.classes + pred]
    }

    pub fn total(&self) -> usize {
        self.counts.iter().sum()
    }

    pub fn row_sum(&self, i: usize) -> usize {
        (0..self.classes).map(|j| self.get(i, j)).sum()
    }

    pub fn col_sum(&self, j: usize) -> usize {
        (0..self.classes).map(|i| self.get(i, j)).sum()
    }

    pub fn accuracy(&self) -> Option<f64> {
        let total = self.total();
        if total == 0 {
            return None;
        }
        let correct: usize = (0..self.classes).map(|i| self.get(i, i)).sum();
        Some(correct as f64 / total as f64)
    }
}

/// Per-class recall and precision; `None` marks an undefined 0/0 ratio.
#[derive(Debug, Clone, Serialize)]
pub struct ClassScores {
    pub recall: Vec<Option<f64>>,
    pub precision: Vec<Option<f64>>,
}

pub fn recall_precision(cm: &ConfusionMatrix) -> ClassScores {
    let mut recall = Vec::with_capacity(cm.classes);
    let mut precision = Vec::with_capacity(cm.classes);
    for i in 0..cm.classes {
        let rs = cm.row_sum(i);
        let cs = cm.col_sum(i);
        let diag = cm.get(i, i) as f64;
        recall.push(if rs > 0 { Some(diag / rs as f64) } else { None });
        precision.push(if cs > 0 { Some(diag / cs as f64) } else { None });
    }
    ClassScores { recall, precision }
}

/// `sens = TP/(TP+FN)`, `spec = TN/(FP+TN)`; zero denominators yield `None`.
pub fn sensitivity_specificity(
    tp: usize,
    fp: usize,
    fne: usize,
    tn: usize,
) -> (Option<f64>, Option<f64>) {
    let sens = if tp + fne > 0 { Some(tp as f64 / (tp + fne) as f64) } else { None };
    let spec = if fp + tn > 0 { Some(tn as f64 / (fp + tn) as f64) } else { None };
    (sens, spec)
}

/// ROC curve with thresholds descending; points run from (0,0) to (1,1) in
/// `(1 - specificity, sensitivity)` coordinates.
#[derive(Debug, Clone, Serialize)]
pub struct RocCurve {
    pub thresholds: Vec<f64>,
    /// `(false_positive_rate, true_positive_rate)` per threshold step.
    pub points: Vec<(f64, f64)>,
    pub auc: f64,
}

/// Trapezoidal ROC/AUC over all distinct score thresholds. Tied scores move
/// diagonally in one step, so the integral counts ties with weight 1/2 and
/// the AUC equals the Mann-Whitney statistic.
pub fn roc_auc(scores: &[f64], labels: &[bool]) -> Result<RocCurve> {
    if scores.len() != labels.len() {
        return Err(Error::shape(
            "roc_auc",
            format!("{} scores vs {} labels", scores.len(), labels.len()),
        ));
    }
    let positives = labels.iter().filter(|&&l| l).count();
    let negatives = labels.len() - positives;
    if positives == 0 || negatives == 0 {
        return Err(Error::InvalidArgument(
            "ROC needs at least one positive and one negative sample".into(),
        ));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::InvalidArgument("ROC scores must be finite".into()));
    }

    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap().then(a.cmp(&b)));

    let mut thresholds = Vec::new();
    let mut points = vec![(0.0, 0.0)];
    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut i = 0usize;
    while i < order.len() {
        let threshold = scores[order[i]];
        // consume the whole tie group at this threshold
        while i < order.len() && scores[order[i]] == threshold {
            if labels[order[i]] {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        thresholds.push(threshold);
        points.push((fp as f64 / negatives as f64, tp as f64 / positives as f64));
    }

    let mut auc = 0.0;
    for pair in points.windows(2) {
        let (x0, y0) = pair[0];
        let (x1, y1) = pair[1];
        auc += (x1 - x0) * (y0 + y1) / 2.0;
    }
    Ok(RocCurve { thresholds, points, auc })
}

/// Quadratic weighted kappa of a square confusion matrix:
/// `kappa = 1 - sum(w .* O) / sum(w .* E)` with `w_ij = (i-j)^2 / (C-1)^2`
/// and `E_ij = rowsum_i * colsum_j / N`. Returns `None` when the expected
/// disagreement is zero (all mass in a single cell).
pub fn quadratic_weighted_kappa(cm: &ConfusionMatrix) -> Result<Option<f64>> {
    let c = cm.classes;
    if c < 2 {
        return Err(Error::InvalidArgument("kappa needs at least 2 classes".into()));
    }
    let total = cm.total();
    if total == 0 {
        return Err(Error::InvalidArgument("kappa needs a positive sample count".into()));
    }
    let n = total as f64;
    let denom_w = ((c - 1) * (c - 1)) as f64;
    let mut weighted_observed = 0.0;
    let mut weighted_expected = 0.0;
    for i in 0..c {
        for j in 0..c {
            let w = ((i as f64 - j as f64) * (i as f64 - j as f64)) / denom_w;
            weighted_observed += w * cm.get(i, j) as f64;
            weighted_expected += w * (cm.row_sum(i) as f64 * cm.col_sum(j) as f64) / n;
        }
    }
    if weighted_expected == 0.0 {
        return Ok(None);
    }
    Ok(Some(1.0 - weighted_observed / weighted_expected))
}
