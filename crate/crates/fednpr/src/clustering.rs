//! Balanced sub-clustering of per-class feature sets and upkeep of the
//! per-client prototype bank.
//!
//! Each class's features are split into K sub-clusters by entropic optimal
//! transport: maximize total cosine similarity to the prototypes subject to
//! every feature distributing unit mass and every sub-cluster receiving n/K.
//! The solver is Sinkhorn-Knopp scaling of the kernel exp(Z·P/ε), with an
//! automatic log-domain fallback when the kernel would under- or overflow.
//! Prototypes are mass-weighted means of their assigned features, renormalized
//! to unit length.
//!
//! Everything in here is deterministic given its inputs; the only randomized
//! entry point is [`init_prototypes`], which takes the generator explicitly.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::matrix::Matrix;

/// Row/column norms below this signal a collapsed direction.
const DEGENERATE_NORM: f64 = 1e-12;
/// Soft mass below this counts as an empty sub-cluster.
const EMPTY_MASS: f64 = 1e-12;
/// ln(1e-300): a kernel exponent below this underflows linear-domain scaling.
const LOG_UNDERFLOW: f64 = -690.7755278982138;
/// Just under ln(f64::MAX): an exponent above this overflows exp.
const LOG_OVERFLOW: f64 = 709.0;

#[derive(Debug, Clone, PartialEq)]
pub struct SinkhornConfig {
    /// Entropic trade-off; smaller values give harder assignments but slower
    /// convergence.
    pub epsilon: f64,
    pub max_iters: usize,
    pub marginal_tol: f64,
    /// Replace the soft assignment with its row-argmax one-hot version.
    /// Off by default: hardening can break equipartition when n/K is not an
    /// integer, and soft masses are what the prototype update wants.
    pub harden: bool,
}

impl Default for SinkhornConfig {
    fn default() -> Self {
        SinkhornConfig {
            epsilon: 0.05,
            max_iters: 500,
            marginal_tol: 1e-6,
            harden: false,
        }
    }
}

/// Diagonal scalings of the converged kernel: Q = diag(row)·M·diag(col).
/// Entries are strictly positive and finite whenever they are representable;
/// an extreme kernel (far-sub-default ε) can push the true scalings outside
/// f64 range, in which case the log-domain solver reports them as 0 or ∞
/// while the assignment matrix itself stays exact.
#[derive(Debug, Clone)]
pub struct SinkhornScaling {
    pub row_scaling: Vec<f64>,
    pub col_scaling: Vec<f64>,
}

/// Sub-cluster centers for one class: unit columns of `directions`
/// (d × K_c) plus the soft sample mass behind each column.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassPrototypes {
    pub directions: Matrix,
    pub mass: Vec<f64>,
}

impl ClassPrototypes {
    pub fn k(&self) -> usize {
        self.directions.cols()
    }
}

/// All prototypes a client maintains: one optional entry per class (absent
/// classes stay `None`) plus the configured sub-cluster budget K. The
/// effective count per class is K_c = min(K, samples of that class).
#[derive(Debug, Clone, PartialEq)]
pub struct PrototypeBank {
    pub classes: Vec<Option<ClassPrototypes>>,
    pub sub_clusters: usize,
}

impl PrototypeBank {
    pub fn new(n_classes: usize, sub_clusters: usize) -> PrototypeBank {
        assert!(sub_clusters >= 1, "need at least one sub-cluster");
        PrototypeBank {
            classes: vec![None; n_classes],
            sub_clusters,
        }
    }

    pub fn n_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn class(&self, c: usize) -> Option<&ClassPrototypes> {
        self.classes.get(c).and_then(|o| o.as_ref())
    }

    pub fn total_columns(&self) -> usize {
        self.classes
            .iter()
            .flatten()
            .map(|cp| cp.directions.cols())
            .sum()
    }
}

/// Scale every row to unit L2 norm.
pub fn normalize_rows(z: &Matrix) -> Result<Matrix> {
    normalize_rows_with_norms(z).map(|(m, _)| m)
}

/// Like [`normalize_rows`] but also returns the original row norms, which the
/// backward pass needs.
pub fn normalize_rows_with_norms(z: &Matrix) -> Result<(Matrix, Vec<f64>)> {
    let mut out = z.clone();
    let mut norms = Vec::with_capacity(z.rows());
    for j in 0..z.rows() {
        let norm = l2(z.row(j));
        if norm < DEGENERATE_NORM {
            return Err(Error::Degenerate {
                op: "normalize_rows",
                detail: format!("row {j} has norm {norm:.3e}"),
            });
        }
        for v in out.row_mut(j) {
            *v /= norm;
        }
        norms.push(norm);
    }
    Ok((out, norms))
}

/// Pull a gradient taken w.r.t. unit rows back to the raw rows:
/// g_raw = (g − (g·ẑ)ẑ) / ‖z‖ per row. `normalized` and `norms` come from
/// [`normalize_rows_with_norms`] on the same raw matrix.
pub fn normalize_rows_vjp(normalized: &Matrix, norms: &[f64], upstream: &Matrix) -> Matrix {
    assert_eq!(normalized.rows(), norms.len(), "norm count mismatch");
    assert!(
        normalized.rows() == upstream.rows() && normalized.cols() == upstream.cols(),
        "upstream gradient shape mismatch"
    );
    let mut out = Matrix::zeros(upstream.rows(), upstream.cols());
    for j in 0..upstream.rows() {
        let zhat = normalized.row(j);
        let g = upstream.row(j);
        let dot: f64 = g.iter().zip(zhat).map(|(a, b)| a * b).sum();
        let dest = out.row_mut(j);
        for i in 0..dest.len() {
            dest[i] = (g[i] - dot * zhat[i]) / norms[j];
        }
    }
    out
}

/// Balanced transport of `z`'s rows (unit vectors) onto prototype columns
/// (unit vectors): returns the assignment Q with row sums 1 and column sums
/// n/K, plus the diagonal scalings that produce it from the kernel.
///
/// Fails only when the marginal violation still exceeds 100× the tolerance
/// after `max_iters` sweeps; a violation inside that band is accepted as-is.
pub fn sinkhorn_assign(
    z: &Matrix,
    prototypes: &Matrix,
    config: &SinkhornConfig,
) -> Result<(Matrix, SinkhornScaling)> {
    assert!(
        config.epsilon > 0.0 && config.marginal_tol > 0.0 && config.max_iters >= 1,
        "invalid sinkhorn configuration"
    );
    if z.cols() != prototypes.rows() {
        return Err(Error::Shape {
            op: "sinkhorn_assign",
            expected: format!("{}-dim prototypes", z.cols()),
            got: format!("{}-dim", prototypes.rows()),
        });
    }
    let n = z.rows();
    let k = prototypes.cols();
    assert!(n >= 1 && k >= 1, "need at least one feature and one cluster");

    let mut e = z.matmul(prototypes);
    e.scale(1.0 / config.epsilon);
    let lo = e.data().iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = e.data().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let r = n as f64 / k as f64;
    let (mut q, scaling) = if lo < LOG_UNDERFLOW || hi > LOG_OVERFLOW {
        sinkhorn_log(&e, r, config)?
    } else {
        sinkhorn_linear(&e, r, config)?
    };
    if config.harden {
        harden_rows(&mut q);
    }
    Ok((q, scaling))
}

/// Plain scaling on the kernel M = exp(e). One sweep rescales columns to r,
/// then rows to 1, so the row marginals are exact and convergence is judged
/// on the columns.
fn sinkhorn_linear(
    e: &Matrix,
    r: f64,
    config: &SinkhornConfig,
) -> Result<(Matrix, SinkhornScaling)> {
    let (n, k) = (e.rows(), e.cols());
    let m = e.map(f64::exp);
    let mut u = vec![1.0; n];
    let mut v = vec![1.0; k];
    let mut violation = f64::INFINITY;
    let mut converged = false;
    let mut iters = 0;
    while iters < config.max_iters {
        iters += 1;
        for kk in 0..k {
            let mut s = 0.0;
            for j in 0..n {
                s += u[j] * m.get(j, kk);
            }
            v[kk] = r / s;
        }
        for j in 0..n {
            let row = m.row(j);
            let mut s = 0.0;
            for kk in 0..k {
                s += row[kk] * v[kk];
            }
            u[j] = 1.0 / s;
        }
        violation = 0.0;
        for kk in 0..k {
            let mut s = 0.0;
            for j in 0..n {
                s += u[j] * m.get(j, kk);
            }
            violation = violation.max((s * v[kk] - r).abs());
        }
        if violation < config.marginal_tol {
            converged = true;
            break;
        }
    }
    if !converged && violation > 100.0 * config.marginal_tol {
        return Err(Error::SinkhornDiverged {
            residual: violation,
            iters,
            tol: config.marginal_tol,
        });
    }
    let mut q = Matrix::zeros(n, k);
    for j in 0..n {
        for kk in 0..k {
            q.set(j, kk, u[j] * m.get(j, kk) * v[kk]);
        }
    }
    Ok((
        q,
        SinkhornScaling {
            row_scaling: u,
            col_scaling: v,
        },
    ))
}

/// The same iteration on log-scalings f, g with ln Q = e + f + g; used when
/// exp(e) would leave f64 range. The returned scalings are exp(f), exp(g)
/// after centering the shared gauge so both stay representable.
fn sinkhorn_log(e: &Matrix, r: f64, config: &SinkhornConfig) -> Result<(Matrix, SinkhornScaling)> {
    let (n, k) = (e.rows(), e.cols());
    let ln_r = r.ln();
    let mut f = vec![0.0; n];
    let mut g = vec![0.0; k];
    let mut buf = vec![0.0; n.max(k)];
    let mut violation = f64::INFINITY;
    let mut converged = false;
    let mut iters = 0;
    while iters < config.max_iters {
        iters += 1;
        for kk in 0..k {
            for j in 0..n {
                buf[j] = e.get(j, kk) + f[j];
            }
            g[kk] = ln_r - lse(&buf[..n]);
        }
        for j in 0..n {
            let row = e.row(j);
            for kk in 0..k {
                buf[kk] = row[kk] + g[kk];
            }
            f[j] = -lse(&buf[..k]);
        }
        violation = 0.0;
        for kk in 0..k {
            for j in 0..n {
                buf[j] = e.get(j, kk) + f[j];
            }
            let col_sum = (lse(&buf[..n]) + g[kk]).exp();
            violation = violation.max((col_sum - r).abs());
        }
        if violation < config.marginal_tol {
            converged = true;
            break;
        }
    }
    if !converged && violation > 100.0 * config.marginal_tol {
        return Err(Error::SinkhornDiverged {
            residual: violation,
            iters,
            tol: config.marginal_tol,
        });
    }
    // f and g are only determined up to (f+c, g−c); center the ranges so the
    // exponentials below stay finite.
    let (fmin, fmax) = min_max(&f);
    let (gmin, gmax) = min_max(&g);
    let c = ((gmax + gmin) - (fmax + fmin)) / 4.0;
    for fv in f.iter_mut() {
        *fv += c;
    }
    for gv in g.iter_mut() {
        *gv -= c;
    }
    let mut q = Matrix::zeros(n, k);
    for j in 0..n {
        for kk in 0..k {
            q.set(j, kk, (e.get(j, kk) + f[j] + g[kk]).exp());
        }
    }
    Ok((
        q,
        SinkhornScaling {
            row_scaling: f.iter().map(|&x| x.exp()).collect(),
            col_scaling: g.iter().map(|&x| x.exp()).collect(),
        },
    ))
}

fn lse(vals: &[f64]) -> f64 {
    let mx = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let s: f64 = vals.iter().map(|v| (v - mx).exp()).sum();
    mx + s.ln()
}

fn min_max(vals: &[f64]) -> (f64, f64) {
    vals.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
        (lo.min(v), hi.max(v))
    })
}

fn harden_rows(q: &mut Matrix) {
    for j in 0..q.rows() {
        let row = q.row_mut(j);
        let mut best = 0;
        for i in 1..row.len() {
            if row[i] > row[best] {
                best = i;
            }
        }
        for v in row.iter_mut() {
            *v = 0.0;
        }
        row[best] = 1.0;
    }
}

/// Mass-weighted means of the assigned features, one column per sub-cluster,
/// renormalized to unit length. Also returns the soft mass N_k per column.
pub fn update_prototypes(z_c: &Matrix, q: &Matrix) -> Result<(Matrix, Vec<f64>)> {
    if z_c.rows() != q.rows() {
        return Err(Error::Shape {
            op: "update_prototypes",
            expected: format!("{} assignment rows", z_c.rows()),
            got: format!("{}", q.rows()),
        });
    }
    let (means, mass) = weighted_means(z_c, q)?;
    let p = normalize_columns(means, "update_prototypes")?;
    Ok((p, mass))
}

/// Column k of the result is (Σ_j Q[j,k]·z_j) / N_k. Errors on any column
/// with (numerically) no mass; callers that can recover handle that case
/// themselves.
fn weighted_means(z_c: &Matrix, q: &Matrix) -> Result<(Matrix, Vec<f64>)> {
    let mass = q.col_sums();
    if let Some(kk) = mass.iter().position(|&m| m < EMPTY_MASS) {
        return Err(Error::EmptyCluster { cluster: kk });
    }
    let mut p = z_c.t_matmul(q);
    for dd in 0..p.rows() {
        for kk in 0..p.cols() {
            p.set(dd, kk, p.get(dd, kk) / mass[kk]);
        }
    }
    Ok((p, mass))
}

fn normalize_columns(mut p: Matrix, op: &'static str) -> Result<Matrix> {
    for kk in 0..p.cols() {
        let mut norm = 0.0;
        for dd in 0..p.rows() {
            norm += p.get(dd, kk) * p.get(dd, kk);
        }
        norm = norm.sqrt();
        if norm < DEGENERATE_NORM {
            return Err(Error::Degenerate {
                op,
                detail: format!("prototype column {kk} has norm {norm:.3e}"),
            });
        }
        for dd in 0..p.rows() {
            p.set(dd, kk, p.get(dd, kk) / norm);
        }
    }
    Ok(p)
}

/// First-round bank: every present class gets K_c = min(K, n_c) prototypes,
/// each the class mean of the unit features plus a small seeded Gaussian
/// nudge (so the K_c starting points are distinct), renormalized. Absent
/// classes stay empty. Rows of `z` need not be unit; they are normalized
/// here.
pub fn init_prototypes(
    z: &Matrix,
    y: &[usize],
    n_classes: usize,
    k: usize,
    rng: &mut ChaCha8Rng,
) -> Result<PrototypeBank> {
    init_prototypes_with_scale(z, y, n_classes, k, 0.01, rng)
}

/// [`init_prototypes`] with an explicit perturbation scale. Scale 0 makes
/// every prototype exactly the normalized class mean (the generator is still
/// consumed identically, so seed bookkeeping does not depend on the scale).
pub fn init_prototypes_with_scale(
    z: &Matrix,
    y: &[usize],
    n_classes: usize,
    k: usize,
    scale: f64,
    rng: &mut ChaCha8Rng,
) -> Result<PrototypeBank> {
    assert!(k >= 1, "need at least one sub-cluster");
    assert!(!y.is_empty(), "need at least one labeled sample");
    if z.rows() != y.len() {
        return Err(Error::Shape {
            op: "init_prototypes",
            expected: format!("{} labels", z.rows()),
            got: format!("{}", y.len()),
        });
    }
    if let Some(&bad) = y.iter().find(|&&l| l >= n_classes) {
        return Err(Error::LabelOutOfRange {
            label: bad,
            n_classes,
        });
    }
    let zn = normalize_rows(z)?;
    let d = z.cols();
    let mut classes = Vec::with_capacity(n_classes);
    for c in 0..n_classes {
        let idx = class_indices(y, c);
        if idx.is_empty() {
            classes.push(None);
            continue;
        }
        let k_c = k.min(idx.len());
        let mean = mean_of_rows(&zn, &idx);
        let mut dirs = Matrix::zeros(d, k_c);
        for kk in 0..k_c {
            let mut col: Vec<f64> = mean
                .iter()
                .map(|&m| {
                    let noise: f64 = rng.sample(StandardNormal);
                    m + scale * noise
                })
                .collect();
            let norm = l2(&col);
            if norm < DEGENERATE_NORM {
                return Err(Error::Degenerate {
                    op: "init_prototypes",
                    detail: format!("class {c} prototype {kk} has norm {norm:.3e}"),
                });
            }
            for v in col.iter_mut() {
                *v /= norm;
            }
            for (dd, v) in col.iter().enumerate() {
                dirs.set(dd, kk, *v);
            }
        }
        let mass = vec![idx.len() as f64 / k_c as f64; k_c];
        classes.push(Some(ClassPrototypes {
            directions: dirs,
            mass,
        }));
    }
    Ok(PrototypeBank {
        classes,
        sub_clusters: k,
    })
}

/// One full bank refresh: per present class, transport the class features
/// onto the previous prototypes and rebuild them as weighted means. Classes
/// the previous bank has no usable entry for are re-anchored
/// deterministically (normalized class mean, then repeatedly the feature
/// farthest from everything placed so far). The input rows need not be unit.
///
/// Clusters that end up with no mass — possible only under hardened
/// assignments — are re-seeded on the farthest feature and carry zero mass.
pub fn cluster_client(
    z: &Matrix,
    y: &[usize],
    bank_prev: &PrototypeBank,
    config: &SinkhornConfig,
) -> Result<PrototypeBank> {
    if z.rows() != y.len() {
        return Err(Error::Shape {
            op: "cluster_client",
            expected: format!("{} labels", z.rows()),
            got: format!("{}", y.len()),
        });
    }
    let n_classes = bank_prev.n_classes();
    if let Some(&bad) = y.iter().find(|&&l| l >= n_classes) {
        return Err(Error::LabelOutOfRange {
            label: bad,
            n_classes,
        });
    }
    let zn = normalize_rows(z)?;
    let k = bank_prev.sub_clusters;
    let mut classes = Vec::with_capacity(n_classes);
    for c in 0..n_classes {
        let idx = class_indices(y, c);
        if idx.is_empty() {
            classes.push(None);
            continue;
        }
        let zc = zn.gather_rows(&idx);
        let k_c = k.min(idx.len());
        let anchors = match bank_prev.class(c) {
            Some(cp) if cp.directions.cols() == k_c && cp.directions.rows() == zc.cols() => {
                cp.directions.clone()
            }
            _ => seed_anchor_columns(&zc, k_c),
        };
        let (q, _) = sinkhorn_assign(&zc, &anchors, config)?;
        classes.push(Some(refresh_class(&zc, &q)?));
    }
    Ok(PrototypeBank {
        classes,
        sub_clusters: k,
    })
}

/// Prototype update tolerant of empty columns: occupied clusters get the
/// normal weighted-mean update, empty ones are re-seeded on the farthest
/// feature (ties to the lowest index) with zero recorded mass.
fn refresh_class(zc: &Matrix, q: &Matrix) -> Result<ClassPrototypes> {
    let mass = q.col_sums();
    let k_c = q.cols();
    let d = zc.cols();
    if mass.iter().all(|&m| m >= EMPTY_MASS) {
        let (p, n_k) = update_prototypes(zc, q)?;
        return Ok(ClassPrototypes {
            directions: p,
            mass: n_k,
        });
    }
    let mut cols: Vec<Option<Vec<f64>>> = vec![None; k_c];
    let mut out_mass = mass.clone();
    for kk in 0..k_c {
        if mass[kk] < EMPTY_MASS {
            continue;
        }
        let mut col = vec![0.0; d];
        for j in 0..zc.rows() {
            let w = q.get(j, kk);
            if w == 0.0 {
                continue;
            }
            for (cv, zv) in col.iter_mut().zip(zc.row(j)) {
                *cv += w * zv;
            }
        }
        for cv in col.iter_mut() {
            *cv /= mass[kk];
        }
        let norm = l2(&col);
        if norm < DEGENERATE_NORM {
            return Err(Error::Degenerate {
                op: "update_prototypes",
                detail: format!("prototype column {kk} has norm {norm:.3e}"),
            });
        }
        for cv in col.iter_mut() {
            *cv /= norm;
        }
        cols[kk] = Some(col);
    }
    for kk in 0..k_c {
        if cols[kk].is_some() {
            continue;
        }
        let placed: Vec<&Vec<f64>> = cols.iter().flatten().collect();
        debug_assert!(!placed.is_empty(), "row marginals guarantee some mass");
        let j = farthest_feature(zc, &placed);
        cols[kk] = Some(zc.row(j).to_vec());
        out_mass[kk] = 0.0;
    }
    let filled: Vec<Vec<f64>> = cols.into_iter().map(|c| c.unwrap()).collect();
    Ok(ClassPrototypes {
        directions: columns_to_matrix(d, &filled),
        mass: out_mass,
    })
}

/// Deterministic anchors for a class with no usable previous prototypes.
/// A single anchor is the normalized class mean. For two or more the anchors
/// are actual feature rows picked by a farthest-point chain starting from the
/// feature least aligned with the mean: anchoring on features (instead of the
/// mean itself) keeps the transport kernel balanced across clusters, so the
/// assignment converges in a handful of sweeps instead of crawling.
fn seed_anchor_columns(zc: &Matrix, k_c: usize) -> Matrix {
    let d = zc.cols();
    let all: Vec<usize> = (0..zc.rows()).collect();
    let mean = mean_of_rows(zc, &all);
    let norm = l2(&mean);
    let mean_dir = if norm < DEGENERATE_NORM {
        zc.row(0).to_vec()
    } else {
        mean.iter().map(|&m| m / norm).collect()
    };
    if k_c == 1 {
        return columns_to_matrix(d, &[mean_dir]);
    }
    let first = zc.row(farthest_feature(zc, &[&mean_dir])).to_vec();
    let mut cols = vec![first];
    while cols.len() < k_c {
        let refs: Vec<&Vec<f64>> = cols.iter().collect();
        let j = farthest_feature(zc, &refs);
        cols.push(zc.row(j).to_vec());
    }
    columns_to_matrix(d, &cols)
}

/// Index of the feature row least similar to its best-matching placed
/// prototype; ties go to the lowest index. Deterministic spread-out choice
/// for re-seeding.
fn farthest_feature(zc: &Matrix, placed: &[&Vec<f64>]) -> usize {
    let mut best_j = 0;
    let mut best_score = f64::INFINITY;
    for j in 0..zc.rows() {
        let row = zc.row(j);
        let mut closest = f64::NEG_INFINITY;
        for p in placed {
            let dot: f64 = row.iter().zip(p.iter()).map(|(a, b)| a * b).sum();
            closest = closest.max(dot);
        }
        if closest < best_score {
            best_score = closest;
            best_j = j;
        }
    }
    best_j
}

fn class_indices(y: &[usize], c: usize) -> Vec<usize> {
    y.iter()
        .enumerate()
        .filter(|(_, &l)| l == c)
        .map(|(j, _)| j)
        .collect()
}

fn mean_of_rows(z: &Matrix, idx: &[usize]) -> Vec<f64> {
    let mut mean = vec![0.0; z.cols()];
    for &j in idx {
        for (mv, zv) in mean.iter_mut().zip(z.row(j)) {
            *mv += zv;
        }
    }
    for mv in mean.iter_mut() {
        *mv /= idx.len() as f64;
    }
    mean
}

fn columns_to_matrix(d: usize, cols: &[Vec<f64>]) -> Matrix {
    let mut m = Matrix::zeros(d, cols.len());
    for (kk, col) in cols.iter().enumerate() {
        for dd in 0..d {
            m.set(dd, kk, col[dd]);
        }
    }
    m
}

fn l2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}
