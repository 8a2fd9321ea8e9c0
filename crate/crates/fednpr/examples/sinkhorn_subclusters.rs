//! Balanced sub-clustering of one class's features with entropic optimal
//! transport.
//!
//! A class is rarely one tight blob: here one "class" is built from two
//! distinct sub-populations. Each refresh assigns the class's feature rows
//! to K prototype columns with a Sinkhorn plan under a balanced column
//! marginal — every prototype receives exactly n/K mass, so neither
//! sub-population can be absorbed into the other — and then moves the
//! prototypes to their weighted means. Iterating the refresh (as the
//! federated round loop does) separates the prototypes onto the true
//! sub-population directions.
//!
//! Run with: `cargo run --example sinkhorn_subclusters`

use fednpr::clustering::{
    cluster_client, init_prototypes, normalize_rows, sinkhorn_assign, SinkhornConfig,
};
use fednpr::matrix::Matrix;
use fednpr::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const DIM: usize = 16;

/// `n` noisy copies of a unit direction.
fn blob(center: &[f64], n: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    (0..n)
        .map(|_| {
            center
                .iter()
                .map(|&c| c + 0.15 * rng.gen_range(-1.0..1.0))
                .collect()
        })
        .collect()
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

fn main() -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(42);

    // Two sub-populations along orthogonal axes, merged into a single class.
    let mut u1 = vec![0.0; DIM];
    u1[0] = 1.0;
    let mut u2 = vec![0.0; DIM];
    u2[1] = 1.0;
    let mut rows = blob(&u1, 60, &mut rng);
    rows.extend(blob(&u2, 60, &mut rng));
    let z = Matrix::from_rows(&rows);
    let y = vec![0usize; 120]; // all the same class

    // Prototypes start as small perturbations of the class mean, which sits
    // between the sub-populations; repeated refreshes amplify the asymmetry.
    let mut bank = init_prototypes(&z, &y, 1, 2, &mut rng)?;
    let config = SinkhornConfig::default();

    println!("prototype alignment across refreshes (cos to each true direction)\n");
    println!("refresh    p0->u1  p0->u2    p1->u1  p1->u2");
    for refresh in 0..=6 {
        if refresh > 0 {
            bank = cluster_client(&z, &y, &bank, &config)?;
        }
        let protos = bank.class(0).expect("class 0 is present");
        let col =
            |k: usize| -> Vec<f64> { (0..DIM).map(|d| protos.directions.get(d, k)).collect() };
        let (p0, p1) = (col(0), col(1));
        println!(
            "{refresh:>7}    {:>6.3}  {:>6.3}    {:>6.3}  {:>6.3}",
            cosine(&p0, &u1),
            cosine(&p0, &u2),
            cosine(&p1, &u1),
            cosine(&p1, &u2)
        );
    }

    let protos = bank.class(0).expect("class 0 is present");
    let masses: Vec<String> = protos.mass.iter().map(|m| format!("{m:.3}")).collect();
    println!("\nfinal prototype masses: [{}] (balanced by construction)", masses.join(", "));

    // The same assignment with hardening: every row goes entirely to its
    // highest-affinity prototype, and the hard counts recover the 60/60
    // sub-population split.
    let hard_cfg = SinkhornConfig { harden: true, ..SinkhornConfig::default() };
    let zn = normalize_rows(&z)?;
    let (q, _) = sinkhorn_assign(&zn, &protos.directions, &hard_cfg)?;
    println!("hardened assignment counts per prototype: {:?}", q.col_sums());
    Ok(())
}
