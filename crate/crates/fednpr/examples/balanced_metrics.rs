//! Why imbalanced evaluation needs balanced metrics.
//!
//! A classifier that ignores the minority class entirely still scores high
//! plain accuracy on a 95:5 dataset. Balanced accuracy (mean per-class
//! recall) and balanced AUC (mean one-vs-rest ranking quality) weight every
//! class equally, so the failure is visible.
//!
//! Run with: `cargo run --example balanced_metrics`

use fednpr::matrix::Matrix;
use fednpr::metrics::{balanced_accuracy, balanced_auc};
use fednpr::Result;

fn main() -> Result<()> {
    // 95 samples of class 0, 5 of class 1; the model predicts class 0 always.
    let labels: Vec<usize> = (0..100).map(|i| usize::from(i >= 95)).collect();
    let majority_only = vec![0usize; 100];

    let plain = majority_only.iter().zip(&labels).filter(|(p, l)| p == l).count() as f64 / 100.0;
    let (bacc, per_class) = balanced_accuracy(&majority_only, &labels, 2)?;
    println!("predict-the-majority classifier on 95:5 data");
    println!("  plain accuracy:    {plain:.3}");
    println!("  balanced accuracy: {bacc:.3}   per-class recall {per_class:?}");
    println!();

    // Ranking quality: scores that order every positive above every negative
    // have bAUC 1; reversing the five hardest positives costs visibly.
    let perfect_scores: Vec<Vec<f64>> = labels
        .iter()
        .map(|&l| if l == 1 { vec![0.1, 0.9] } else { vec![0.9, 0.1] })
        .collect();
    let (bauc_perfect, _) = balanced_auc(&Matrix::from_rows(&perfect_scores), &labels, 2)?;

    let mut flipped_scores = perfect_scores;
    flipped_scores[95] = vec![0.95, 0.05]; // one positive now ranks below all negatives
    let (bauc_flipped, per_class_auc) =
        balanced_auc(&Matrix::from_rows(&flipped_scores), &labels, 2)?;

    println!("ranking view of the same data");
    println!("  bAUC, perfect ranking:            {bauc_perfect:.3}");
    println!("  bAUC, 1 of 5 positives misranked: {bauc_flipped:.3}   per-class {per_class_auc:?}");
    println!();

    // Ties count half: uniform scores give exactly 0.5.
    let uniform: Vec<Vec<f64>> = labels.iter().map(|_| vec![0.5, 0.5]).collect();
    let (bauc_uniform, _) = balanced_auc(&Matrix::from_rows(&uniform), &labels, 2)?;
    println!("  bAUC, all scores tied:            {bauc_uniform:.3} (chance level)");
    Ok(())
}
