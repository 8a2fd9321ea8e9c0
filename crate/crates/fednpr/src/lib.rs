//! Desk-scale federated learning simulator for class-imbalanced, non-IID
//! clients, built around non-parametric prototype regularization: each
//! round, every client re-clusters its own features into balanced per-class
//! sub-clusters (entropic optimal transport keeps the clusters from
//! collapsing) and trains against a prior-calibrated softmax plus a pull
//! toward those prototype directions. Everything — data synthesis,
//! partitioning, the MLP and its optimizer, the solver, the round loop, the
//! metrics, and the experiment harness — is implemented here, deterministic
//! end to end: one seed fixes the world, the model, and every batch.
//!
//! # Modules
//!
//! - [`matrix`]: the dense row-major `f64` matrix all numerics run on.
//! - [`nn`]: MLP (ReLU hidden layers, identity feature layer), manual
//!   backward pass, Adam, and the stepped learning-rate schedule.
//! - [`clustering`]: row normalization, the Sinkhorn assignment solver with
//!   balanced column marginals, and per-class prototype banks.
//! - [`losses`]: class priors, cross-entropy on prior-shifted logits, the
//!   prototype-pull regularizer, and their combination with exact gradients.
//! - [`data`]: Gaussian-blob synthesis with per-class sample counts,
//!   Dirichlet partitioning with exact count conservation, stratified
//!   splits, and a plain-text export/import format.
//! - [`metrics`]: balanced accuracy and tie-aware balanced one-vs-rest AUC.
//! - [`federation`]: client/server state, sample-weighted delta
//!   aggregation (full or extractor-only), the six algorithm arms, and the
//!   round loop; also the binary round-payload format.
//! - [`experiment`]: TOML config with preset and flag layering, sweep
//!   grids, seed repetition, CSV/summary emission, and output verification.
//!
//! # Algorithm arms
//!
//! `fedavg`, `fedprox`, `fednpr`, `fedprox_npr`, `fednpr_per` (personal
//! classifier heads, extractor-only aggregation), and `local_only` share one
//! code path, so zero-strength settings collapse exactly: `fednpr` at
//! `npr_weight = 0` and `fedprox` at `fedprox_mu = 0` reproduce `fedavg`
//! bit for bit.
//!
//! # Where to start
//!
//! Each major capability has a runnable example:
//!
//! - `quickstart`: synthesize, partition, train, print per-round metrics.
//! - `compare_algorithms`: all six arms on one heterogeneous world.
//! - `sinkhorn_subclusters`: balanced sub-clustering finds the modes of a
//!   two-population class.
//! - `dirichlet_partition`: how the concentration parameter shapes client
//!   skew, with exact conservation.
//! - `imbalanced_losses`: prior calibration versus plain cross-entropy on
//!   50:5:1 data.
//! - `personalized_heads`: per-client gains from persistent heads, and the
//!   bit-exact classifier freeze under extractor-only aggregation.
//! - `balanced_metrics`: why plain accuracy hides minority-class collapse.
//! - `sweep_and_verify`: config-driven sweeps, CSV emission, tamper-evident
//!   verification.
//! - `export_import_data`: freeze a federated world to text and reload it
//!   bit-exactly.
//! - `delta_payloads`: the binary payload a client uploads each round.
//!
//! The `fednpr` binary drives the same experiment layer from the command
//! line (`--config`, `--preset`, sweep flags, `--verify`).

pub mod clustering;
pub mod data;
pub mod error;
pub mod experiment;
pub mod federation;
pub mod losses;
pub mod matrix;
pub mod metrics;
pub mod nn;

pub(crate) mod rng;

pub use error::{Error, Result};
