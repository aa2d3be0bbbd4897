//! Multiclass metrics: confusion matrix, one-vs-rest precision / recall / F1
//! with macro and micro averages, and exact empirical ROC curves.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{param_err, Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassStats {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub tn: u64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RocCurve {
    /// `(fpr, tpr)` from `(0, 0)` to `(1, 1)`, one point per distinct score.
    pub points: Vec<(f64, f64)>,
    /// `None` when the class has no positives or no negatives.
    pub auc: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub total: u64,
    pub accuracy: f64,
    pub macro_precision: f64,
    pub macro_recall: f64,
    pub macro_f1: f64,
    pub micro_precision: f64,
    pub micro_recall: f64,
    pub micro_f1: f64,
    pub per_class: Vec<ClassStats>,
    /// Rows are true classes, columns predictions.
    pub confusion: Vec<Vec<u64>>,
    pub roc: Vec<RocCurve>,
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

fn f1(p: f64, r: f64) -> f64 {
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

/// Index of the largest score, lowest index on ties.
pub fn argmax(scores: &[f64]) -> usize {
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate() {
        if s > scores[best] {
            best = i;
        }
    }
    best
}

pub fn confusion_matrix(labels: &[usize], predictions: &[usize], classes: usize) -> Result<Vec<Vec<u64>>> {
    if labels.len() != predictions.len() {
        return param_err("confusion_matrix", "label and prediction counts differ");
    }
    let mut m = vec![vec![0u64; classes]; classes];
    for (&l, &p) in labels.iter().zip(predictions) {
        if l >= classes || p >= classes {
            return Err(Error::Label { label: l.max(p), classes });
        }
        m[l][p] += 1;
    }
    Ok(m)
}

/// Per-class one-vs-rest statistics from a confusion matrix.
pub fn class_stats(confusion: &[Vec<u64>]) -> Vec<ClassStats> {
    let total: u64 = confusion.iter().flatten().sum();
    (0..confusion.len())
        .map(|c| {
            let tp = confusion[c][c];
            let fn_ = confusion[c].iter().sum::<u64>() - tp;
            let fp = confusion.iter().map(|row| row[c]).sum::<u64>() - tp;
            let tn = total - tp - fp - fn_;
            let precision = ratio(tp, tp + fp);
            let recall = ratio(tp, tp + fn_);
            ClassStats { tp, fp, fn_, tn, precision, recall, f1: f1(precision, recall) }
        })
        .collect()
}

/// Empirical ROC with a threshold at every distinct score; AUC by the
/// trapezoidal rule.
pub fn roc_curve(scores: &[f64], positive: &[bool]) -> RocCurve {
    let p = positive.iter().filter(|&&b| b).count();
    let n = positive.len() - p;
    if p == 0 || n == 0 {
        return RocCurve { points: Vec::new(), auc: None };
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut points = vec![(0.0, 0.0)];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        while i < order.len() && scores[order[i]] == s {
            if positive[order[i]] {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        points.push((fp as f64 / n as f64, tp as f64 / p as f64));
    }
    let auc = points.windows(2).map(|w| (w[1].0 - w[0].0) * (w[1].1 + w[0].1) / 2.0).sum();
    RocCurve { points, auc: Some(auc) }
}

/// Full report from per-sample class scores (softmax rows) and true labels.
pub fn evaluate_scores(labels: &[usize], scores: &[Vec<f64>], classes: usize) -> Result<EvalReport> {
    if labels.is_empty() {
        return param_err("evaluate", "empty split");
    }
    if labels.len() != scores.len() {
        return param_err("evaluate", format!("{} labels but {} score rows", labels.len(), scores.len()));
    }
    let predictions: Vec<usize> = scores.iter().map(|s| argmax(s)).collect();
    let confusion = confusion_matrix(labels, &predictions, classes)?;
    let per_class = class_stats(&confusion);
    let total = labels.len() as u64;
    let correct: u64 = (0..classes).map(|c| confusion[c][c]).sum();
    let k = classes as f64;
    let macro_precision = per_class.iter().map(|s| s.precision).sum::<f64>() / k;
    let macro_recall = per_class.iter().map(|s| s.recall).sum::<f64>() / k;
    let macro_f1 = per_class.iter().map(|s| s.f1).sum::<f64>() / k;
    let tp: u64 = per_class.iter().map(|s| s.tp).sum();
    let fp: u64 = per_class.iter().map(|s| s.fp).sum();
    let fn_: u64 = per_class.iter().map(|s| s.fn_).sum();
    let micro_precision = ratio(tp, tp + fp);
    let micro_recall = ratio(tp, tp + fn_);
    let roc = (0..classes)
        .map(|c| {
            let s: Vec<f64> = scores.iter().map(|row| row[c]).collect();
            let pos: Vec<bool> = labels.iter().map(|&l| l == c).collect();
            roc_curve(&s, &pos)
        })
        .collect();
    Ok(EvalReport {
        total,
        accuracy: ratio(correct, total),
        macro_precision,
        macro_recall,
        macro_f1,
        micro_precision,
        micro_recall,
        micro_f1: f1(micro_precision, micro_recall),
        per_class,
        confusion,
        roc,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn from_confusion(conf: &[[u64; 3]]) -> (Vec<usize>, Vec<Vec<f64>>) {
        let mut labels = Vec::new();
        let mut scores = Vec::new();
        for (t, row) in conf.iter().enumerate() {
            for (p, &n) in row.iter().enumerate() {
                for _ in 0..n {
                    labels.push(t);
                    let mut s = vec![0.0; 3];
                    s[p] = 1.0;
                    scores.push(s);
                }
            }
        }
        (labels, scores)
    }

    #[test]
    fn toy_confusion_by_hand() {
        let (labels, scores) = from_confusion(&[[2, 0, 0], [1, 1, 0], [0, 0, 2]]);
        let r = evaluate_scores(&labels, &scores, 3).unwrap();
        assert_eq!(r.confusion, vec![vec![2, 0, 0], vec![1, 1, 0], vec![0, 0, 2]]);
        assert!((r.per_class[0].precision - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(r.per_class[0].recall, 1.0);
        assert!((r.per_class[0].f1 - 0.8).abs() < 1e-15);
        assert!((r.per_class[1].f1 - 2.0 / 3.0).abs() < 1e-15);
        assert!((r.macro_f1 - (0.8 + 2.0 / 3.0 + 1.0) / 3.0).abs() < 1e-15);
        assert!((r.macro_f1 - 0.8222).abs() < 1e-4);
        assert!((r.accuracy - 5.0 / 6.0).abs() < 1e-15);
        for s in &r.per_class {
            assert_eq!(s.tp + s.fp + s.fn_ + s.tn, 6);
        }
    }

    #[test]
    fn perfect_predictions() {
        let (labels, scores) = from_confusion(&[[3, 0, 0], [0, 2, 0], [0, 0, 4]]);
        let r = evaluate_scores(&labels, &scores, 3).unwrap();
        assert_eq!((r.accuracy, r.macro_precision, r.macro_recall, r.macro_f1), (1.0, 1.0, 1.0, 1.0));
        assert!(r.roc.iter().all(|c| c.auc == Some(1.0)));
    }

    #[test]
    fn empty_split_is_error() {
        assert!(evaluate_scores(&[], &[], 3).is_err());
    }

    #[test]
    fn roc_handles_ties_and_degenerate_classes() {
        let c = roc_curve(&[0.5, 0.5, 0.5, 0.5], &[true, false, true, false]);
        assert_eq!(c.points, vec![(0.0, 0.0), (1.0, 1.0)]);
        assert_eq!(c.auc, Some(0.5));
        assert_eq!(roc_curve(&[0.1, 0.2], &[true, true]).auc, None);
    }
}
