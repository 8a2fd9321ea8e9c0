//! Training objective: a class-prior-calibrated supervised loss, a
//! prototype-alignment regularizer over sub-cluster banks, and their
//! λ-weighted combination, each with exact analytic gradients.
//!
//! The supervised term is cross-entropy on logits shifted by the log of a
//! smoothed local class prior, so the head is trained as if the local label
//! distribution were part of the logit. Rare local classes therefore stop
//! being drowned out by frequent ones. Evaluation always scores raw logits;
//! the shift exists only inside the loss.
//!
//! The regularizer pulls each (row-normalized) feature toward the most
//! similar sub-cluster prototype of its own class and away from the best
//! prototypes of the other classes, via a softmax over per-class best
//! similarities. Prototypes are constants here: they are refreshed by the
//! clustering pass, never by backprop.

use crate::clustering::PrototypeBank;
use crate::error::{Error, Result};
use crate::matrix::Matrix;

/// Smoothed class-frequency prior for one client.
///
/// `pi` sums to one; with a positive `smoothing` pseudo-count every entry is
/// strictly positive even for locally missing classes, keeping `ln pi`
/// finite.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassPrior {
    pub pi: Vec<f64>,
    pub smoothing: f64,
}

/// pi_c = (counts_c + smoothing) / (Σ counts + C·smoothing).
pub fn compute_class_prior(counts: &[usize], smoothing: f64) -> Result<ClassPrior> {
    if counts.is_empty() {
        return Err(Error::Degenerate {
            op: "compute_class_prior",
            detail: "no classes".into(),
        });
    }
    if !(smoothing >= 0.0 && smoothing.is_finite()) {
        return Err(Error::Config(format!(
            "prior smoothing must be finite and non-negative, got {smoothing}"
        )));
    }
    let total: f64 = counts.iter().map(|&c| c as f64).sum::<f64>()
        + counts.len() as f64 * smoothing;
    if total <= 0.0 {
        return Err(Error::Degenerate {
            op: "compute_class_prior",
            detail: "all counts zero and smoothing zero".into(),
        });
    }
    let pi = counts.iter().map(|&c| (c as f64 + smoothing) / total).collect();
    Ok(ClassPrior { pi, smoothing })
}

/// One evaluation of the combined objective.
///
/// `total = sup_term + λ·npr_term`; `logit_grad` is n×C, `feature_grad` is
/// n×d with respect to the row-normalized features (the λ factor already
/// applied). Both gradients carry the 1/n batch mean.
#[derive(Debug, Clone)]
pub struct LossValue {
    pub total: f64,
    pub sup_term: f64,
    pub npr_term: f64,
    pub logit_grad: Matrix,
    pub feature_grad: Matrix,
}

/// Cross-entropy on prior-shifted logits.
///
/// Returns the batch-mean loss and its gradient with respect to the raw
/// logits: (softmax(logits + ln pi) − onehot)/n. Because the shift is
/// constant per class, a uniform prior reproduces plain cross-entropy.
pub fn balanced_softmax_loss(
    logits: &Matrix,
    labels: &[usize],
    prior: &ClassPrior,
) -> Result<(f64, Matrix)> {
    let (n, c) = (logits.rows(), logits.cols());
    if n == 0 {
        return Err(Error::Shape {
            op: "balanced_softmax_loss",
            expected: "at least one sample".into(),
            got: "empty batch".into(),
        });
    }
    if labels.len() != n || prior.pi.len() != c {
        return Err(Error::Shape {
            op: "balanced_softmax_loss",
            expected: format!("{n} labels, prior of length {c}"),
            got: format!("{} labels, prior of length {}", labels.len(), prior.pi.len()),
        });
    }
    for &y in labels {
        if y >= c {
            return Err(Error::LabelOutOfRange { label: y, n_classes: c });
        }
    }
    let ln_pi: Vec<f64> = prior.pi.iter().map(|&p| p.ln()).collect();
    let inv_n = 1.0 / n as f64;
    let mut grad = Matrix::zeros(n, c);
    let mut loss = 0.0;
    let mut shifted = vec![0.0; c];
    for (i, &y) in labels.iter().enumerate() {
        for (s, (&l, &lp)) in shifted.iter_mut().zip(logits.row(i).iter().zip(&ln_pi)) {
            *s = l + lp;
        }
        let m = shifted.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let denom: f64 = shifted.iter().map(|&s| (s - m).exp()).sum();
        loss += m + denom.ln() - shifted[y];
        let g = grad.row_mut(i);
        for (gv, &s) in g.iter_mut().zip(&shifted) {
            *gv = (s - m).exp() / denom * inv_n;
        }
        g[y] -= inv_n;
    }
    loss *= inv_n;
    if !loss.is_finite() || !grad.all_finite() {
        return Err(Error::NonFinite { op: "balanced_softmax_loss" });
    }
    Ok((loss, grad))
}

/// Prototype-alignment regularizer.
///
/// For each sample the per-class score is the best inner product between its
/// feature row and that class's prototype columns; the loss is the batch
/// mean of cross-entropy over those scores, restricted to classes that have
/// prototypes in the bank. Returns the loss and its gradient with respect to
/// `z` (prototypes held constant); the subgradient at the per-class max is
/// routed to the lowest-index winning prototype.
///
/// `z` rows are expected to be unit-norm; the caller chains this gradient
/// through the row normalization.
pub fn npr_loss(z: &Matrix, labels: &[usize], bank: &PrototypeBank) -> Result<(f64, Matrix)> {
    let (n, d) = (z.rows(), z.cols());
    if n == 0 {
        return Err(Error::Shape {
            op: "npr_loss",
            expected: "at least one sample".into(),
            got: "empty batch".into(),
        });
    }
    if labels.len() != n {
        return Err(Error::Shape {
            op: "npr_loss",
            expected: format!("{n} labels"),
            got: format!("{}", labels.len()),
        });
    }
    let present: Vec<usize> = (0..bank.n_classes()).filter(|&c| bank.class(c).is_some()).collect();
    let mut pos_of = vec![usize::MAX; bank.n_classes()];
    for (q, &c) in present.iter().enumerate() {
        pos_of[c] = q;
        let dirs = &bank.class(c).unwrap().directions;
        if dirs.rows() != d {
            return Err(Error::Shape {
                op: "npr_loss",
                expected: format!("{d}-dimensional prototypes"),
                got: format!("{} for class {c}", dirs.rows()),
            });
        }
    }
    for &y in labels {
        if y >= bank.n_classes() || bank.class(y).is_none() {
            return Err(Error::MissingPrototypes { class: y });
        }
    }

    let p = present.len();
    // Best similarity per (sample, present class) and the winning column.
    let mut scores = Matrix::zeros(n, p);
    let mut winner = vec![vec![0usize; p]; n];
    for i in 0..n {
        let zi = z.row(i);
        for (q, &c) in present.iter().enumerate() {
            let dirs = &bank.class(c).unwrap().directions;
            let mut best = f64::NEG_INFINITY;
            let mut best_k = 0;
            for k in 0..dirs.cols() {
                let mut dot = 0.0;
                for (dd, &zv) in zi.iter().enumerate() {
                    dot += zv * dirs.get(dd, k);
                }
                if dot > best {
                    best = dot;
                    best_k = k;
                }
            }
            scores.set(i, q, best);
            winner[i][q] = best_k;
        }
    }

    let inv_n = 1.0 / n as f64;
    let mut loss = 0.0;
    let mut grad = Matrix::zeros(n, d);
    let mut soft = vec![0.0; p];
    for (i, &y) in labels.iter().enumerate() {
        let row = scores.row(i);
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let denom: f64 = row.iter().map(|&s| (s - m).exp()).sum();
        let pos = pos_of[y];
        loss += m + denom.ln() - row[pos];
        for (sv, &s) in soft.iter_mut().zip(row) {
            *sv = (s - m).exp() / denom;
        }
        soft[pos] -= 1.0;
        let g = grad.row_mut(i);
        for (q, &c) in present.iter().enumerate() {
            let dirs = &bank.class(c).unwrap().directions;
            let k = winner[i][q];
            let w = soft[q] * inv_n;
            for (dd, gv) in g.iter_mut().enumerate() {
                *gv += w * dirs.get(dd, k);
            }
        }
    }
    loss *= inv_n;
    if !loss.is_finite() || !grad.all_finite() {
        return Err(Error::NonFinite { op: "npr_loss" });
    }
    Ok((loss, grad))
}

/// `sup + λ·npr` with both gradient blocks.
///
/// At λ = 0 the supervised term passes through bit-for-bit and the feature
/// gradient is exactly zero, so a run with the regularizer disabled trains
/// identically to one that never computes it.
pub fn combined_loss(
    logits: &Matrix,
    z: &Matrix,
    labels: &[usize],
    prior: &ClassPrior,
    bank: &PrototypeBank,
    lambda: f64,
) -> Result<LossValue> {
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(Error::Config(format!(
            "npr weight must be finite and non-negative, got {lambda}"
        )));
    }
    let (sup_term, logit_grad) = balanced_softmax_loss(logits, labels, prior)?;
    let (npr_term, npr_grad) = npr_loss(z, labels, bank)?;
    let feature_grad = if lambda == 0.0 {
        Matrix::zeros(z.rows(), z.cols())
    } else {
        let mut g = npr_grad;
        g.scale(lambda);
        g
    };
    Ok(LossValue {
        total: sup_term + lambda * npr_term,
        sup_term,
        npr_term,
        logit_grad,
        feature_grad,
    })
}
