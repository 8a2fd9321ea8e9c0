//! Evaluation metrics that ignore class frequency: balanced accuracy (mean
//! per-class recall), balanced one-vs-rest AUC (mean per-class rank AUC with
//! tie mass counted half), and their unweighted cross-client averages.
//!
//! Classes a split does not contain — or, for AUC, classes without both a
//! positive and a negative — carry NaN in the per-class vectors and are
//! excluded from the means.

use crate::data::Split;
use crate::error::{Error, Result};
use crate::matrix::Matrix;

/// One client × round × split evaluation.
#[derive(Debug, Clone)]
pub struct EvalRecord {
    pub client: usize,
    pub round: usize,
    pub split: Split,
    pub bacc: f64,
    pub bauc: f64,
    pub per_class_acc: Vec<f64>,
    pub per_class_auc: Vec<f64>,
    pub loss_sup: f64,
    pub loss_npr: f64,
}

/// Mean per-class recall over the classes present in `labels`.
pub fn balanced_accuracy(
    predictions: &[usize],
    labels: &[usize],
    n_classes: usize,
) -> Result<(f64, Vec<f64>)> {
    if labels.is_empty() {
        return Err(Error::Degenerate {
            op: "balanced_accuracy",
            detail: "no samples".into(),
        });
    }
    if predictions.len() != labels.len() {
        return Err(Error::Shape {
            op: "balanced_accuracy",
            expected: format!("{} predictions", labels.len()),
            got: format!("{}", predictions.len()),
        });
    }
    let mut total = vec![0usize; n_classes];
    let mut correct = vec![0usize; n_classes];
    for (&p, &y) in predictions.iter().zip(labels) {
        if y >= n_classes {
            return Err(Error::LabelOutOfRange { label: y, n_classes });
        }
        total[y] += 1;
        correct[y] += usize::from(p == y);
    }
    let per_class: Vec<f64> = total
        .iter()
        .zip(&correct)
        .map(|(&t, &c)| if t == 0 { f64::NAN } else { c as f64 / t as f64 })
        .collect();
    Ok((nan_mean(&per_class), per_class))
}

/// One-vs-rest AUC per class from the rank statistic, averaged over the
/// classes that have at least one positive and one negative.
pub fn balanced_auc(
    scores: &Matrix,
    labels: &[usize],
    n_classes: usize,
) -> Result<(f64, Vec<f64>)> {
    let n = scores.rows();
    if n == 0 {
        return Err(Error::Degenerate {
            op: "balanced_auc",
            detail: "no samples".into(),
        });
    }
    if labels.len() != n || scores.cols() != n_classes {
        return Err(Error::Shape {
            op: "balanced_auc",
            expected: format!("{n} labels and {n_classes} score columns"),
            got: format!("{} labels, {} columns", labels.len(), scores.cols()),
        });
    }
    if !scores.all_finite() {
        return Err(Error::NonFinite { op: "balanced_auc" });
    }
    for &y in labels {
        if y >= n_classes {
            return Err(Error::LabelOutOfRange { label: y, n_classes });
        }
    }

    let mut per_class = vec![f64::NAN; n_classes];
    let mut column = vec![0.0; n];
    for c in 0..n_classes {
        let n_pos = labels.iter().filter(|&&y| y == c).count();
        let n_neg = n - n_pos;
        if n_pos == 0 || n_neg == 0 {
            continue;
        }
        for (i, v) in column.iter_mut().enumerate() {
            *v = scores.get(i, c);
        }
        let ranks = average_ranks(&column);
        let pos_rank_sum: f64 = labels
            .iter()
            .enumerate()
            .filter(|&(_, &y)| y == c)
            .map(|(i, _)| ranks[i])
            .sum();
        let np = n_pos as f64;
        per_class[c] = (pos_rank_sum - np * (np + 1.0) / 2.0) / (np * n_neg as f64);
    }
    Ok((nan_mean(&per_class), per_class))
}

/// 1-based ranks with ties sharing their group's average rank.
fn average_ranks(values: &[f64]) -> Vec<f64> {
    let n = values.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let shared = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = shared;
        }
        i = j + 1;
    }
    ranks
}

/// Mean ignoring NaN entries; NaN when nothing is evaluable.
fn nan_mean(values: &[f64]) -> f64 {
    let mut sum = 0.0;
    let mut count = 0usize;
    for &v in values {
        if !v.is_nan() {
            sum += v;
            count += 1;
        }
    }
    if count == 0 {
        f64::NAN
    } else {
        sum / count as f64
    }
}

/// Unweighted across-client means of bACC and bAUC. Records whose bAUC is
/// NaN (no evaluable class) drop out of that mean only.
pub fn federated_average(records: &[EvalRecord]) -> Result<(f64, f64)> {
    if records.is_empty() {
        return Err(Error::Degenerate {
            op: "federated_average",
            detail: "no records".into(),
        });
    }
    let baccs: Vec<f64> = records.iter().map(|r| r.bacc).collect();
    let baucs: Vec<f64> = records.iter().map(|r| r.bauc).collect();
    Ok((nan_mean(&baccs), nan_mean(&baucs)))
}
