//! End-to-end acceptance gate.
//!
//! Ten checks cover the load-bearing guarantees: balanced-assignment solver
//! correctness against marginal contracts and an exhaustive 2x2 oracle,
//! analytic gradients against central finite differences, degeneracy
//! equivalences between algorithm arms, aggregation algebra, metric oracles,
//! partition conservation and balance, trend reproduction on the bundled
//! preset, ablation directions, and byte-level determinism.
//!
//! Each check prints one `ACCEPT-NN ...: pass` line; run
//! `cargo test --test acceptance -- --nocapture` to see them.

use std::collections::HashMap;
use std::fs;
use std::sync::{Mutex, OnceLock};
use std::time::Instant;

use fednpr::clustering::{init_prototypes, sinkhorn_assign, PrototypeBank, SinkhornConfig};
use fednpr::clustering::{normalize_rows_vjp, normalize_rows_with_norms};
use fednpr::data::{
    dirichlet_partition, generate_synthetic, stratified_split, PartitionConfig, Split,
    SyntheticDataConfig,
};
use fednpr::experiment::{parse_config, run_experiment, CliOverrides, SweepPoint};
use fednpr::federation::{
    aggregate_extractor_only, aggregate_full, compute_client_weights, run_federation, Algorithm,
    FederationConfig, ModelDelta, ServerState,
};
use fednpr::losses::{
    balanced_softmax_loss, combined_loss, compute_class_prior, npr_loss, ClassPrior,
};
use fednpr::matrix::Matrix;
use fednpr::metrics::{balanced_accuracy, balanced_auc, EvalRecord};
use fednpr::nn::{DenseLayer, ModelConfig, ModelParams};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn random_unit_rows(n: usize, d: usize, r: &mut ChaCha8Rng) -> Matrix {
    let mut m = Matrix::zeros(n, d);
    for i in 0..n {
        loop {
            let row: Vec<f64> = (0..d).map(|_| r.gen_range(-1.0..1.0)).collect();
            let norm: f64 = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm > 1e-3 {
                for (j, v) in row.iter().enumerate() {
                    m.set(i, j, v / norm);
                }
                break;
            }
        }
    }
    m
}

fn random_unit_cols(d: usize, k: usize, r: &mut ChaCha8Rng) -> Matrix {
    random_unit_rows(k, d, r).transpose()
}

// ---------------------------------------------------------------- check 1

/// Maximize <Q,S> - eps * sum q ln q over the one-parameter 2x2 transport
/// polytope (row sums 1, column sums 1) by golden-section search.
fn polytope_oracle_2x2(s: &Matrix, epsilon: f64) -> Matrix {
    let xlogx = |x: f64| if x <= 0.0 { 0.0 } else { x * x.ln() };
    let objective = |t: f64| -> f64 {
        let gain = t * (s.get(0, 0) + s.get(1, 1)) + (1.0 - t) * (s.get(0, 1) + s.get(1, 0));
        gain - epsilon * 2.0 * (xlogx(t) + xlogx(1.0 - t))
    };
    let phi = (5.0_f64.sqrt() - 1.0) / 2.0;
    let (mut a, mut b) = (0.0_f64, 1.0_f64);
    let mut c = b - phi * (b - a);
    let mut d = a + phi * (b - a);
    for _ in 0..200 {
        if objective(c) >= objective(d) {
            b = d;
            d = c;
            c = b - phi * (b - a);
        } else {
            a = c;
            c = d;
            d = a + phi * (b - a);
        }
    }
    let t = 0.5 * (a + b);
    Matrix::from_vec(2, 2, vec![t, 1.0 - t, 1.0 - t, t])
}

#[test]
fn a01_sinkhorn_marginals_and_polytope_oracle() {
    let start = Instant::now();
    // Tight tolerance with a large budget: even a soft landing at budget
    // exhaustion (<= 100x tol) stays well inside the 1e-6 contract.
    let config = SinkhornConfig {
        marginal_tol: 1e-9,
        max_iters: 200_000,
        ..SinkhornConfig::default()
    };
    assert_eq!(config.epsilon, 0.05);

    let mut r = rng(2001);
    for case in 0..200 {
        let n = r.gen_range(4..=128);
        let k = r.gen_range(1..=8);
        let z = random_unit_rows(n, 16, &mut r);
        let p = random_unit_cols(16, k, &mut r);
        let (q, _) = sinkhorn_assign(&z, &p, &config)
            .unwrap_or_else(|e| panic!("case {case} (n={n}, K={k}) failed: {e}"));
        assert!(q.data().iter().all(|&v| v >= 0.0), "case {case}: negative mass");
        for i in 0..n {
            let s: f64 = q.row(i).iter().sum();
            assert!((s - 1.0).abs() <= 1e-6, "case {case}: row {i} sums to {s}");
        }
        let want_col = n as f64 / k as f64;
        for (j, s) in q.col_sums().into_iter().enumerate() {
            assert!(
                (s - want_col).abs() <= 1e-6,
                "case {case}: column {j} sums to {s}, want {want_col}"
            );
        }
    }

    for case in 0..40 {
        let mut r2 = rng(3000 + case);
        let z = random_unit_rows(2, 16, &mut r2);
        let p = random_unit_cols(16, 2, &mut r2);
        let (q, _) = sinkhorn_assign(&z, &p, &config).unwrap();
        let want = polytope_oracle_2x2(&z.matmul(&p), config.epsilon);
        assert!(
            q.max_abs_diff(&want) <= 1e-3,
            "2x2 case {case}: {:?} vs oracle {:?}",
            q.data(),
            want.data()
        );
    }

    let elapsed = start.elapsed();
    assert!(elapsed.as_secs_f64() < 10.0, "took {elapsed:?}, budget 10 s");
    println!(
        "ACCEPT-01 sinkhorn marginals (200 random problems) and 2x2 polytope oracle: pass ({:.2}s)",
        elapsed.as_secs_f64()
    );
}

// ---------------------------------------------------------------- check 2

const FD_STEP: f64 = 1e-5;

/// Relative error with the same floor the backward-pass tests use: tiny
/// gradients are compared absolutely at 1e-3 scale.
fn rel_err(fd: f64, analytic: f64) -> f64 {
    (fd - analytic).abs() / fd.abs().max(analytic.abs()).max(1e-3)
}

fn random_labels(n: usize, classes: usize, r: &mut ChaCha8Rng) -> Vec<usize> {
    // Every class appears at least once so priors and prototype banks cover
    // the label set; remaining slots are uniform.
    assert!(n >= classes);
    let mut y: Vec<usize> = (0..n)
        .map(|i| if i < classes { i } else { r.gen_range(0..classes) })
        .collect();
    for i in (1..n).rev() {
        let j = r.gen_range(0..=i);
        y.swap(i, j);
    }
    y
}

fn random_prior(classes: usize, r: &mut ChaCha8Rng) -> ClassPrior {
    let counts: Vec<usize> = (0..classes).map(|_| r.gen_range(1..60)).collect();
    compute_class_prior(&counts, 1.0).unwrap()
}

fn random_bank(d: usize, classes: usize, k: usize, r: &mut ChaCha8Rng) -> PrototypeBank {
    let m = classes * k.max(2) * 3;
    let zb = random_unit_rows(m, d, r);
    let yb = random_labels(m, classes, r);
    init_prototypes(&zb, &yb, classes, k, r).unwrap()
}

#[test]
fn a02_losses_and_end_to_end_gradients_match_finite_differences() {
    let start = Instant::now();

    // Prior-shifted cross-entropy: gradient at the logits.
    let mut r = rng(4001);
    for case in 0..100 {
        let n = r.gen_range(2..=8);
        let c = r.gen_range(2..=6);
        let logits = {
            let mut m = Matrix::zeros(n, c);
            for v in m.data_mut() {
                *v = r.gen_range(-2.0..2.0);
            }
            m
        };
        let y: Vec<usize> = (0..n).map(|_| r.gen_range(0..c)).collect();
        let prior = random_prior(c, &mut r);
        let (_, grad) = balanced_softmax_loss(&logits, &y, &prior).unwrap();
        for _ in 0..6 {
            let (i, j) = (r.gen_range(0..n), r.gen_range(0..c));
            let mut plus = logits.clone();
            plus.set(i, j, plus.get(i, j) + FD_STEP);
            let mut minus = logits.clone();
            minus.set(i, j, minus.get(i, j) - FD_STEP);
            let fd = (balanced_softmax_loss(&plus, &y, &prior).unwrap().0
                - balanced_softmax_loss(&minus, &y, &prior).unwrap().0)
                / (2.0 * FD_STEP);
            let rel = rel_err(fd, grad.get(i, j));
            assert!(rel <= 1e-4, "bsm case {case} ({i},{j}): rel {rel:.2e}");
        }
    }

    // Prototype pull: gradient at the (already normalized) features.
    let mut r = rng(4002);
    for case in 0..100 {
        let d = r.gen_range(4..=8);
        let classes = r.gen_range(2..=3);
        let k = r.gen_range(1..=3);
        let n = r.gen_range(classes..=10);
        let bank = random_bank(d, classes, k, &mut r);
        let z = random_unit_rows(n, d, &mut r);
        let y = random_labels(n, classes, &mut r);
        let (_, grad) = npr_loss(&z, &y, &bank).unwrap();
        for _ in 0..6 {
            let (i, j) = (r.gen_range(0..n), r.gen_range(0..d));
            let mut plus = z.clone();
            plus.set(i, j, plus.get(i, j) + FD_STEP);
            let mut minus = z.clone();
            minus.set(i, j, minus.get(i, j) - FD_STEP);
            let fd = (npr_loss(&plus, &y, &bank).unwrap().0
                - npr_loss(&minus, &y, &bank).unwrap().0)
                / (2.0 * FD_STEP);
            let rel = rel_err(fd, grad.get(i, j));
            assert!(rel <= 1e-4, "npr case {case} ({i},{j}): rel {rel:.2e}");
        }
    }

    // Combined objective: both gradient blocks, including the lambda factor.
    let mut r = rng(4003);
    for case in 0..100 {
        let d = r.gen_range(4..=8);
        let classes = r.gen_range(2..=4);
        let n = r.gen_range(classes..=8);
        let lambda = if case % 10 == 0 { 0.0 } else { r.gen_range(0.25..2.0) };
        let bank = random_bank(d, classes, 2, &mut r);
        let prior = random_prior(classes, &mut r);
        let y = random_labels(n, classes, &mut r);
        let z = random_unit_rows(n, d, &mut r);
        let logits = {
            let mut m = Matrix::zeros(n, classes);
            for v in m.data_mut() {
                *v = r.gen_range(-2.0..2.0);
            }
            m
        };
        let lv = combined_loss(&logits, &z, &y, &prior, &bank, lambda).unwrap();
        let total = |lg: &Matrix, zz: &Matrix| -> f64 {
            combined_loss(lg, zz, &y, &prior, &bank, lambda).unwrap().total
        };
        for _ in 0..4 {
            let (i, j) = (r.gen_range(0..n), r.gen_range(0..classes));
            let mut plus = logits.clone();
            plus.set(i, j, plus.get(i, j) + FD_STEP);
            let mut minus = logits.clone();
            minus.set(i, j, minus.get(i, j) - FD_STEP);
            let fd = (total(&plus, &z) - total(&minus, &z)) / (2.0 * FD_STEP);
            let rel = rel_err(fd, lv.logit_grad.get(i, j));
            assert!(rel <= 1e-4, "combined case {case} logits ({i},{j}): rel {rel:.2e}");
        }
        for _ in 0..4 {
            let (i, j) = (r.gen_range(0..n), r.gen_range(0..d));
            let mut plus = z.clone();
            plus.set(i, j, plus.get(i, j) + FD_STEP);
            let mut minus = z.clone();
            minus.set(i, j, minus.get(i, j) - FD_STEP);
            let fd = (total(&logits, &plus) - total(&logits, &minus)) / (2.0 * FD_STEP);
            let rel = rel_err(fd, lv.feature_grad.get(i, j));
            assert!(rel <= 1e-4, "combined case {case} features ({i},{j}): rel {rel:.2e}");
        }
    }

    // End to end: the combined objective through the network (classifier on
    // raw features, regularizer on their normalized rows), differentiated
    // with respect to every kind of parameter.
    let mut r = rng(4004);
    let cfg = ModelConfig {
        input_dim: 5,
        hidden_dims: vec![6],
        feature_dim: 4,
        n_classes: 3,
    };
    for case in 0..100 {
        let n = 5;
        // Redraw until no feature row is near dead: a fully silenced hidden
        // layer (zero biases, ReLU) yields an exactly-zero feature row that
        // the row normalization rejects, and near-zero rows are too stiff
        // for finite differences.
        let (params, x) = loop {
            let params = ModelParams::init(&cfg, &mut r);
            let mut m = Matrix::zeros(n, cfg.input_dim);
            for v in m.data_mut() {
                *v = r.gen_range(-1.5..1.5);
            }
            let f = params.forward_features(&m).unwrap();
            let min_norm = (0..n)
                .map(|i| f.row(i).iter().map(|v| v * v).sum::<f64>().sqrt())
                .fold(f64::INFINITY, f64::min);
            if min_norm >= 0.05 {
                break (params, m);
            }
        };
        let y = random_labels(n, cfg.n_classes, &mut r);
        let prior = random_prior(cfg.n_classes, &mut r);
        let bank = random_bank(cfg.feature_dim, cfg.n_classes, 2, &mut r);
        let lambda = r.gen_range(0.25..2.0);

        let objective = |p: &ModelParams| -> f64 {
            let f = p.forward_features(&x).unwrap();
            let logits = p.logits_from_features(&f);
            let (zn, _) = normalize_rows_with_norms(&f).unwrap();
            combined_loss(&logits, &zn, &y, &prior, &bank, lambda).unwrap().total
        };

        let f = params.forward_features(&x).unwrap();
        let logits = params.logits_from_features(&f);
        let (zn, norms) = normalize_rows_with_norms(&f).unwrap();
        let lv = combined_loss(&logits, &zn, &y, &prior, &bank, lambda).unwrap();
        let raw_grad = normalize_rows_vjp(&zn, &norms, &lv.feature_grad);
        let grads = params.backward(&x, &lv.logit_grad, &raw_grad).unwrap();

        let n_layers = params.extractor.len() + 1;
        for _ in 0..8 {
            let li = r.gen_range(0..n_layers);
            let (w_len, b_len) = if li < params.extractor.len() {
                (params.extractor[li].weight.data().len(), params.extractor[li].bias.len())
            } else {
                (params.classifier.weight.data().len(), params.classifier.bias.len())
            };
            let idx = r.gen_range(0..w_len + b_len);
            let mut plus = params.clone();
            let mut minus = params.clone();
            for (p, delta) in [(&mut plus, FD_STEP), (&mut minus, -FD_STEP)] {
                let layer = if li < p.extractor.len() {
                    &mut p.extractor[li]
                } else {
                    &mut p.classifier
                };
                if idx < w_len {
                    layer.weight.data_mut()[idx] += delta;
                } else {
                    layer.bias[idx - w_len] += delta;
                }
            }
            let fd = (objective(&plus) - objective(&minus)) / (2.0 * FD_STEP);
            let g = if li < grads.extractor.len() { &grads.extractor[li] } else { &grads.classifier };
            let analytic = if idx < w_len { g.weight.data()[idx] } else { g.bias[idx - w_len] };
            let rel = rel_err(fd, analytic);
            assert!(
                rel <= 1e-4,
                "end-to-end case {case} layer {li} elem {idx}: fd {fd} vs {analytic} (rel {rel:.2e})"
            );
        }
    }

    let elapsed = start.elapsed();
    assert!(elapsed.as_secs_f64() < 60.0, "took {elapsed:?}, budget 60 s");
    println!(
        "ACCEPT-02 supervised, regularizer, combined, and end-to-end gradients vs central finite differences (100 cases each): pass ({:.2}s)",
        elapsed.as_secs_f64()
    );
}

// ---------------------------------------------------------------- check 3

fn degeneracy_world() -> Vec<fednpr::data::ClientDataset> {
    let dataset = generate_synthetic(&SyntheticDataConfig {
        n_classes: 4,
        input_dim: 16,
        samples_per_class: vec![200, 100, 60, 40],
        class_mean_separation: 3.0,
        noise_scale: 1.0,
        seed: 5,
    })
    .unwrap();
    dirichlet_partition(
        &dataset,
        &PartitionConfig {
            n_clients: 4,
            dirichlet_alpha_per_class: vec![1.0; 4],
            missing_class_prob: 0.2,
            seed: 5,
        },
    )
    .unwrap()
    .iter()
    .map(|c| stratified_split(c, 0.8).unwrap())
    .collect()
}

fn bits_equal(a: f64, b: f64) -> bool {
    a.to_bits() == b.to_bits() || (a.is_nan() && b.is_nan())
}

/// Model-trajectory fields must agree bit for bit. The regularizer readout
/// is excluded: prototype arms record the raw regularizer term where other
/// arms record NaN, without feeding it back into training.
fn assert_histories_bit_identical(a: &[EvalRecord], b: &[EvalRecord], what: &str) {
    assert_eq!(a.len(), b.len(), "{what}: history lengths differ");
    for (ra, rb) in a.iter().zip(b) {
        assert_eq!((ra.client, ra.round, ra.split), (rb.client, rb.round, rb.split), "{what}");
        assert!(bits_equal(ra.bacc, rb.bacc), "{what}: bacc {} vs {}", ra.bacc, rb.bacc);
        assert!(bits_equal(ra.bauc, rb.bauc), "{what}: bauc {} vs {}", ra.bauc, rb.bauc);
        assert!(bits_equal(ra.loss_sup, rb.loss_sup), "{what}: loss_sup differs");
        assert_eq!(ra.per_class_acc.len(), rb.per_class_acc.len(), "{what}");
        for (x, z) in ra.per_class_acc.iter().zip(&rb.per_class_acc) {
            assert!(bits_equal(*x, *z), "{what}: per-class recall differs");
        }
        for (x, z) in ra.per_class_auc.iter().zip(&rb.per_class_auc) {
            assert!(bits_equal(*x, *z), "{what}: per-class auc differs");
        }
    }
}

fn assert_params_bit_identical(a: &ModelParams, b: &ModelParams, what: &str) {
    let layer_eq = |la: &DenseLayer, lb: &DenseLayer| {
        la.weight.data().iter().zip(lb.weight.data()).all(|(x, y)| x.to_bits() == y.to_bits())
            && la.bias.iter().zip(&lb.bias).all(|(x, y)| x.to_bits() == y.to_bits())
    };
    assert_eq!(a.extractor.len(), b.extractor.len(), "{what}");
    for (la, lb) in a.extractor.iter().zip(&b.extractor) {
        assert!(layer_eq(la, lb), "{what}: extractor layer differs");
    }
    assert!(layer_eq(&a.classifier, &b.classifier), "{what}: classifier differs");
}

#[test]
fn a03_zero_strength_arms_are_bit_identical_to_plain_averaging() {
    let start = Instant::now();
    let clients = degeneracy_world();
    let base = FederationConfig {
        n_clients: 4,
        rounds: 10,
        input_dim: 16,
        n_classes: 4,
        hidden_dims: vec![24],
        sub_clusters: 2,
        base_lr: 3e-3,
        seed: 5,
        ..FederationConfig::default()
    };

    let fedavg = run_federation(
        &FederationConfig { algorithm: Algorithm::FedAvg, ..base.clone() },
        &clients,
    )
    .unwrap();

    let npr_zero = run_federation(
        &FederationConfig { algorithm: Algorithm::FedNpr, npr_weight: 0.0, ..base.clone() },
        &clients,
    )
    .unwrap();
    assert_histories_bit_identical(&npr_zero.history, &fedavg.history, "fednpr(lambda=0) vs fedavg");
    assert_params_bit_identical(
        &npr_zero.global_model,
        &fedavg.global_model,
        "fednpr(lambda=0) vs fedavg",
    );

    let prox_zero = run_federation(
        &FederationConfig { algorithm: Algorithm::FedProx, fedprox_mu: 0.0, ..base.clone() },
        &clients,
    )
    .unwrap();
    assert_histories_bit_identical(&prox_zero.history, &fedavg.history, "fedprox(mu=0) vs fedavg");
    assert_params_bit_identical(
        &prox_zero.global_model,
        &fedavg.global_model,
        "fedprox(mu=0) vs fedavg",
    );

    let elapsed = start.elapsed();
    assert!(elapsed.as_secs_f64() < 60.0, "took {elapsed:?}, budget 60 s");
    println!(
        "ACCEPT-03 fednpr(lambda=0) and fedprox(mu=0) bit-identical to fedavg over 4 clients x 10 rounds: pass ({:.2}s)",
        elapsed.as_secs_f64()
    );
}

// ---------------------------------------------------------------- check 4

fn random_delta(config: &ModelConfig, scale: f64, r: &mut ChaCha8Rng, samples: usize) -> ModelDelta {
    let a = ModelParams::init(config, r);
    let mut delta = ModelDelta {
        extractor: a.extractor.clone(),
        classifier: a.classifier.clone(),
        sample_count: samples,
    };
    for layer in delta.extractor.iter_mut().chain(std::iter::once(&mut delta.classifier)) {
        for v in layer.weight.data_mut() {
            *v *= scale;
        }
        for v in layer.bias.iter_mut() {
            *v = r.gen_range(-scale..scale);
        }
    }
    delta
}

#[test]
fn a04_aggregation_algebra_and_classifier_freeze() {
    let start = Instant::now();

    // Normalized weights sum to one within 1e-15, including a realistically
    // lopsided six-client census.
    let mut r = rng(6001);
    let mut cases: Vec<Vec<usize>> = vec![
        vec![1807, 9930, 655, 2691, 351, 3163],
        vec![1, 1],
        vec![7, 7, 7, 7, 7, 7, 7],
    ];
    for _ in 0..50 {
        let n = r.gen_range(2..=10);
        cases.push((0..n).map(|_| r.gen_range(1..10_000)).collect());
    }
    for counts in &cases {
        let w = compute_client_weights(counts).unwrap();
        let sum: f64 = w.iter().sum();
        assert!((sum - 1.0).abs() <= 1e-15, "weights for {counts:?} sum to {sum}");
        assert!(w.iter().all(|&x| x > 0.0));
    }

    // Full aggregation reproduces a hand-computed weighted sum entrywise.
    let cfg = ModelConfig { input_dim: 6, hidden_dims: vec![5], feature_dim: 4, n_classes: 3 };
    let mut r = rng(6002);
    let start_model = ModelParams::init(&cfg, &mut r);
    let deltas: Vec<ModelDelta> = [(100, 0.8), (300, 0.5), (600, 0.2)]
        .iter()
        .map(|&(s, sc)| random_delta(&cfg, sc, &mut r, s))
        .collect();
    let weights = compute_client_weights(&[100, 300, 600]).unwrap();

    let mut server = ServerState { global_model: start_model.clone(), round: 0, history: vec![] };
    aggregate_full(&mut server, &deltas).unwrap();

    let hand = |pick: &dyn Fn(&ModelParams) -> &DenseLayer,
                pick_d: &dyn Fn(&ModelDelta) -> &DenseLayer| {
        let before = pick(&start_model);
        let after = pick(&server.global_model);
        for idx in 0..before.weight.data().len() {
            let want = before.weight.data()[idx]
                + weights
                    .iter()
                    .zip(&deltas)
                    .map(|(w, d)| w * pick_d(d).weight.data()[idx])
                    .sum::<f64>();
            let got = after.weight.data()[idx];
            assert!((want - got).abs() <= 1e-15, "weight {idx}: {got} vs hand {want}");
        }
        for idx in 0..before.bias.len() {
            let want = before.bias[idx]
                + weights.iter().zip(&deltas).map(|(w, d)| w * pick_d(d).bias[idx]).sum::<f64>();
            let got = after.bias[idx];
            assert!((want - got).abs() <= 1e-15, "bias {idx}: {got} vs hand {want}");
        }
    };
    for li in 0..start_model.extractor.len() {
        hand(&move |p| &p.extractor[li], &move |d| &d.extractor[li]);
    }
    hand(&|p| &p.classifier, &|d| &d.classifier);

    // Extractor-only aggregation never touches classifier bits.
    let mut server2 = ServerState { global_model: start_model.clone(), round: 0, history: vec![] };
    let before_bits: Vec<u64> = start_model
        .classifier
        .weight
        .data()
        .iter()
        .chain(&start_model.classifier.bias)
        .map(|v| v.to_bits())
        .collect();
    aggregate_extractor_only(&mut server2, &deltas).unwrap();
    let after_bits: Vec<u64> = server2
        .global_model
        .classifier
        .weight
        .data()
        .iter()
        .chain(&server2.global_model.classifier.bias)
        .map(|v| v.to_bits())
        .collect();
    assert_eq!(before_bits, after_bits, "classifier bits changed under extractor-only aggregation");
    // ... while the extractor did move.
    assert!(server2.global_model.extractor[0].weight.max_abs_diff(&start_model.extractor[0].weight) > 0.0);

    let elapsed = start.elapsed();
    println!(
        "ACCEPT-04 client weights sum to 1 +/- 1e-15, full aggregation matches hand-computed sums at 1e-15, extractor-only freeze is bit-exact: pass ({:.2}s)",
        elapsed.as_secs_f64()
    );
}

// ---------------------------------------------------------------- check 5

/// One-vs-rest AUC by explicit pair counting, ties half-weighted.
fn pair_counting_auc(scores: &[f64], positive: &[bool]) -> f64 {
    let mut wins = 0.0;
    let mut pairs = 0.0;
    for (i, &pi) in positive.iter().enumerate() {
        if !pi {
            continue;
        }
        for (j, &pj) in positive.iter().enumerate() {
            if pj {
                continue;
            }
            pairs += 1.0;
            if scores[i] > scores[j] {
                wins += 1.0;
            } else if scores[i] == scores[j] {
                wins += 0.5;
            }
        }
    }
    wins / pairs
}

#[test]
fn a05_metrics_match_pair_counting_and_hand_fixtures() {
    let start = Instant::now();

    let mut r = rng(7001);
    for case in 0..100 {
        let classes = r.gen_range(2..=5);
        let n = r.gen_range(classes.max(5)..=200);
        let y = random_labels(n, classes, &mut r);
        // Quantized scores force plenty of exact ties.
        let mut scores = Matrix::zeros(n, classes);
        for v in scores.data_mut() {
            *v = if case % 2 == 0 {
                r.gen_range(0.0..1.0)
            } else {
                f64::from(r.gen_range(0..=20_i32)) / 20.0
            };
        }
        let (mean, per_class) = balanced_auc(&scores, &y, classes).unwrap();
        let mut oracle_sum = 0.0;
        for c in 0..classes {
            let column: Vec<f64> = (0..n).map(|i| scores.get(i, c)).collect();
            let positive: Vec<bool> = y.iter().map(|&l| l == c).collect();
            let want = pair_counting_auc(&column, &positive);
            assert!(
                (per_class[c] - want).abs() <= 1e-12,
                "case {case} class {c}: {} vs oracle {want}",
                per_class[c]
            );
            oracle_sum += want;
        }
        assert!((mean - oracle_sum / classes as f64).abs() <= 1e-12, "case {case}: mean");
    }

    // Hand-counted recall fixtures, exact.
    let (b, per) = balanced_accuracy(&[0, 0, 1, 2, 1], &[0, 1, 1, 2, 2], 3).unwrap();
    assert_eq!(per, vec![1.0, 0.5, 0.5]);
    assert_eq!(b, 2.0 / 3.0);

    let labels: Vec<usize> = (0..100).map(|i| usize::from(i >= 95)).collect();
    let (b, per) = balanced_accuracy(&vec![0; 100], &labels, 2).unwrap();
    assert_eq!(per, vec![1.0, 0.0]);
    assert_eq!(b, 0.5);

    // Absent classes are skipped, not counted as zero.
    let (b, _) = balanced_accuracy(&[0, 0, 0], &[0, 0, 1], 3).unwrap();
    assert_eq!(b, 0.5);

    let elapsed = start.elapsed();
    println!(
        "ACCEPT-05 balanced AUC equals tie-aware pair counting at 1e-12 (100 instances), recall fixtures exact: pass ({:.2}s)",
        elapsed.as_secs_f64()
    );
}

// ---------------------------------------------------------------- check 6

/// Spearman rank correlation with average ranks for ties.
fn spearman(xs: &[f64], ys: &[f64]) -> f64 {
    fn ranks(v: &[f64]) -> Vec<f64> {
        let mut idx: Vec<usize> = (0..v.len()).collect();
        idx.sort_by(|&a, &b| v[a].partial_cmp(&v[b]).unwrap());
        let mut out = vec![0.0; v.len()];
        let mut i = 0;
        while i < idx.len() {
            let mut j = i;
            while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
                j += 1;
            }
            let avg = (i + j) as f64 / 2.0 + 1.0;
            for &k in &idx[i..=j] {
                out[k] = avg;
            }
            i = j + 1;
        }
        out
    }
    let rx = ranks(xs);
    let ry = ranks(ys);
    let n = xs.len() as f64;
    let mx = rx.iter().sum::<f64>() / n;
    let my = ry.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut vx = 0.0;
    let mut vy = 0.0;
    for (a, b) in rx.iter().zip(&ry) {
        cov += (a - mx) * (b - my);
        vx += (a - mx) * (a - mx);
        vy += (b - my) * (b - my);
    }
    cov / (vx.sqrt() * vy.sqrt())
}

#[test]
fn a06_partition_conserves_counts_and_alpha_orders_balance() {
    let start = Instant::now();
    let n_classes = 5;
    let n_clients = 6;
    let dataset = generate_synthetic(&SyntheticDataConfig {
        n_classes,
        input_dim: 4,
        samples_per_class: vec![1000; n_classes],
        class_mean_separation: 3.0,
        noise_scale: 1.0,
        seed: 0,
    })
    .unwrap();
    let global: Vec<usize> = {
        let mut h = vec![0usize; n_classes];
        for &l in &dataset.labels {
            h[l] += 1;
        }
        h
    };

    let mut alphas_obs = Vec::new();
    let mut variances = Vec::new();
    for &alpha in &[0.5, 5.0, 50.0] {
        for seed in 0..50 {
            let clients = dirichlet_partition(
                &dataset,
                &PartitionConfig {
                    n_clients,
                    dirichlet_alpha_per_class: vec![alpha; n_classes],
                    missing_class_prob: 0.0,
                    seed,
                },
            )
            .unwrap();

            // Conservation: exact, class by class.
            let mut recovered = vec![0usize; n_classes];
            for client in &clients {
                for &l in &client.labels {
                    recovered[l] += 1;
                }
            }
            assert_eq!(recovered, global, "alpha {alpha} seed {seed} lost samples");

            // Balance: variance of client shares, averaged over classes.
            let mut var_sum = 0.0;
            for c in 0..n_classes {
                let shares: Vec<f64> = clients
                    .iter()
                    .map(|cl| {
                        cl.labels.iter().filter(|&&l| l == c).count() as f64 / global[c] as f64
                    })
                    .collect();
                let mean = shares.iter().sum::<f64>() / n_clients as f64;
                var_sum += shares.iter().map(|s| (s - mean) * (s - mean)).sum::<f64>()
                    / n_clients as f64;
            }
            alphas_obs.push(alpha);
            variances.push(var_sum / n_classes as f64);
        }
    }

    let rho = spearman(&alphas_obs, &variances);
    assert!(rho < -0.9, "share variance not rank-decreasing in alpha: spearman {rho:.4}");

    let elapsed = start.elapsed();
    println!(
        "ACCEPT-06 partition conserves class counts exactly; share variance rank-decreasing in alpha (spearman {rho:.3} < -0.9): pass ({:.2}s)",
        elapsed.as_secs_f64()
    );
}

// ------------------------------------------------------- checks 7, 8, 9

#[derive(Clone, Copy, PartialEq)]
struct PresetArm {
    algorithm: Algorithm,
    sub_clusters: usize,
    npr_weight: f64,
    npr_only: bool,
}

impl PresetArm {
    fn new(algorithm: Algorithm) -> Self {
        PresetArm { algorithm, sub_clusters: 2, npr_weight: 1.0, npr_only: false }
    }

    fn key(&self) -> String {
        format!(
            "{} K={} lambda={:.6} npr_only={}",
            self.algorithm, self.sub_clusters, self.npr_weight, self.npr_only
        )
    }
}

/// Per-seed final balanced accuracies (mean over clients of the last round's
/// test rows) on the bundled `ich-like` preset, cached across checks so the
/// trend, ablation, and module checks share runs.
fn preset_seed_means(arm: PresetArm) -> Vec<f64> {
    static CACHE: OnceLock<Mutex<HashMap<String, Vec<f64>>>> = OnceLock::new();
    let cache = CACHE.get_or_init(|| Mutex::new(HashMap::new()));
    if let Some(hit) = cache.lock().unwrap().get(&arm.key()) {
        return hit.clone();
    }

    let spec = parse_config(None, Some("ich-like"), &CliOverrides::default()).unwrap();
    assert_eq!(spec.seeds.len(), 5, "preset pins five seeds");
    let total: usize = spec.data.samples_per_class.iter().sum();
    assert!((2500..=3500).contains(&total), "preset is ~3k samples, got {total}");
    assert_eq!(spec.base.rounds, 40);

    let point = SweepPoint {
        algorithm: arm.algorithm,
        sub_clusters: arm.sub_clusters,
        npr_weight: arm.npr_weight,
    };
    let mut finals = Vec::with_capacity(spec.seeds.len());
    for &seed in &spec.seeds {
        let world = spec.world_for(seed).unwrap();
        let mut config = spec.federation_for(&point, seed);
        config.npr_only = arm.npr_only;
        let server = run_federation(&config, &world).unwrap();
        let baccs: Vec<f64> = server
            .history
            .iter()
            .filter(|rec| {
                rec.round == config.rounds && rec.split == Split::Test && !rec.bacc.is_nan()
            })
            .map(|rec| rec.bacc)
            .collect();
        finals.push(baccs.iter().sum::<f64>() / baccs.len() as f64);
    }
    cache.lock().unwrap().insert(arm.key(), finals.clone());
    finals
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

#[test]
fn a07_preset_trend_personalized_beats_regularized_beats_plain() {
    let start = Instant::now();
    let fedavg = mean(&preset_seed_means(PresetArm::new(Algorithm::FedAvg)));
    let fednpr = mean(&preset_seed_means(PresetArm::new(Algorithm::FedNpr)));
    let fednpr_per = mean(&preset_seed_means(PresetArm::new(Algorithm::FedNprPer)));

    assert!(
        fednpr - fedavg >= 0.010,
        "regularizer gap too small: fednpr {fednpr:.4} vs fedavg {fedavg:.4}"
    );
    assert!(
        fednpr_per - fednpr >= 0.010,
        "personalization gap too small: fednpr_per {fednpr_per:.4} vs fednpr {fednpr:.4}"
    );

    let elapsed = start.elapsed();
    assert!(elapsed.as_secs_f64() < 600.0, "took {elapsed:?}, budget 10 min");
    println!(
        "ACCEPT-07 preset 5-seed means ordered fednpr_per {fednpr_per:.4} > fednpr {fednpr:.4} > fedavg {fedavg:.4}, both gaps >= 1 point: pass ({:.1}s)",
        elapsed.as_secs_f64()
    );
}

#[test]
fn a08_preset_ablations_sub_clusters_help_and_supervision_is_essential() {
    let start = Instant::now();

    let k1 = preset_seed_means(PresetArm { sub_clusters: 1, ..PresetArm::new(Algorithm::FedNpr) });
    let k2 = preset_seed_means(PresetArm::new(Algorithm::FedNpr));
    let k4 = preset_seed_means(PresetArm { sub_clusters: 4, ..PresetArm::new(Algorithm::FedNpr) });

    let wins = |multi: &[f64]| multi.iter().zip(&k1).filter(|(m, s)| m >= s).count();
    let (w2, w4) = (wins(&k2), wins(&k4));
    assert!(w2 >= 3, "K=2 beats K=1 in only {w2}/5 seeds");
    assert!(w4 >= 3, "K=4 beats K=1 in only {w4}/5 seeds");

    let combined = mean(&k2);
    let regularizer_only =
        mean(&preset_seed_means(PresetArm { npr_only: true, ..PresetArm::new(Algorithm::FedNpr) }));
    let drop = combined - regularizer_only;
    assert!(
        drop >= 0.05,
        "dropping supervision lost only {:.1} points ({combined:.4} -> {regularizer_only:.4})",
        drop * 100.0
    );

    let elapsed = start.elapsed();
    assert!(elapsed.as_secs_f64() < 600.0, "took {elapsed:?}, budget 10 min");
    println!(
        "ACCEPT-08 sub-clusters beat K=1 in {w2}/5 and {w4}/5 seeds; regularizer-only arm drops {:.1} points (>= 5): pass ({:.1}s)",
        drop * 100.0,
        elapsed.as_secs_f64()
    );
}

#[test]
fn a09_regularizer_improves_both_plain_and_proximal_averaging() {
    let start = Instant::now();
    let fedavg = mean(&preset_seed_means(PresetArm::new(Algorithm::FedAvg)));
    let fednpr = mean(&preset_seed_means(PresetArm::new(Algorithm::FedNpr)));
    let fedprox = mean(&preset_seed_means(PresetArm::new(Algorithm::FedProx)));
    let fedprox_npr = mean(&preset_seed_means(PresetArm::new(Algorithm::FedProxNpr)));

    assert!(fednpr > fedavg, "fednpr {fednpr:.4} <= fedavg {fedavg:.4}");
    assert!(fedprox_npr > fedprox, "fedprox_npr {fedprox_npr:.4} <= fedprox {fedprox:.4}");

    let elapsed = start.elapsed();
    assert!(elapsed.as_secs_f64() < 600.0, "took {elapsed:?}, budget 10 min");
    println!(
        "ACCEPT-09 regularizer as a module: fednpr {fednpr:.4} > fedavg {fedavg:.4} and fedprox_npr {fedprox_npr:.4} > fedprox {fedprox:.4} on 5-seed means: pass ({:.1}s)",
        elapsed.as_secs_f64()
    );
}

// --------------------------------------------------------------- check 10

#[test]
fn a10_identical_specs_produce_byte_identical_outputs() {
    let start = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let config_path = dir.path().join("exp.toml");
    fs::write(
        &config_path,
        r#"
[data]
n_classes = 2
input_dim = 6
samples_per_class = [30, 18]

[partition]
n_clients = 2
dirichlet_alpha_per_class = [1.0, 1.0]
missing_class_prob = 0.0

[training]
rounds = 2
hidden_dims = [8]
feature_dim = 4

[sweep]
algorithms = ["fednpr", "fedavg"]
k_values = [2]
lambda_values = [0.5]
seeds = [0, 1]
"#,
    )
    .unwrap();

    let run = |out: &str| {
        let flags = CliOverrides {
            out_dir: Some(dir.path().join(out)),
            ..CliOverrides::default()
        };
        let spec = parse_config(Some(&config_path), None, &flags).unwrap();
        run_experiment(&spec).unwrap()
    };
    let first = run("first");
    let second = run("second");

    let csv_a = fs::read(&first.csv_path).unwrap();
    let csv_b = fs::read(&second.csv_path).unwrap();
    assert!(!csv_a.is_empty());
    assert_eq!(csv_a, csv_b, "records.csv differs between identical runs");

    let sum_a = fs::read(&first.summary_path).unwrap();
    let sum_b = fs::read(&second.summary_path).unwrap();
    assert_eq!(sum_a, sum_b, "summary.txt differs between identical runs");

    let elapsed = start.elapsed();
    println!(
        "ACCEPT-10 repeated runs of one spec emit byte-identical records.csv and summary.txt: pass ({:.2}s)",
        elapsed.as_secs_f64()
    );
}
