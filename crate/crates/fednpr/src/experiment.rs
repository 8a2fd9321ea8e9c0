//! Experiment runner: resolve a configuration from defaults, an optional
//! preset, an optional TOML file, and command-line overrides (in that
//! precedence order); execute the sweep grid across seeds; and emit
//! byte-deterministic result files.
//!
//! Outputs per run directory:
//!
//! * `records.csv` — one row per (sweep point, seed, round, client, split)
//!   with the header `round,client,split,algorithm,K,lambda,seed,bacc,bauc,
//!   loss_sup,loss_npr`. Floats carry exactly six decimals; absent values
//!   (a metric with no evaluable classes, the regularizer column under a
//!   non-prototype arm) print as `NaN`.
//! * `summary.txt` — one line per sweep point: mean and population standard
//!   deviation over seeds of the final-round test metrics, averaged
//!   unweighted across clients within each seed.
//!
//! The summary is computed from the CSV rows *as written* — parsed back
//! from their six-decimal form — so [`verify_output`] can regenerate
//! `summary.txt` from `records.csv` alone and demand byte equality.

use std::collections::HashSet;
use std::fs;
use std::io::{BufWriter, Write as IoWrite};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::Deserialize;

use crate::data::{
    dirichlet_partition, generate_synthetic, stratified_split, ClientDataset, PartitionConfig,
    Split, SyntheticDataConfig,
};
use crate::error::{Error, Result};
use crate::federation::{run_federation, Algorithm, FederationConfig};

pub const CSV_HEADER: &str = "round,client,split,algorithm,K,lambda,seed,bacc,bauc,loss_sup,loss_npr";

/// A fully resolved experiment: the data recipe, the base training
/// configuration, the seed list, and the sweep axes. Each run substitutes
/// one seed into the data/partition/federation configs and one sweep point
/// into (algorithm, sub_clusters, npr_weight).
#[derive(Debug, Clone)]
pub struct ExperimentSpec {
    pub data: SyntheticDataConfig,
    pub partition: PartitionConfig,
    pub train_fraction: f64,
    pub base: FederationConfig,
    pub seeds: Vec<u64>,
    pub algorithms: Vec<Algorithm>,
    pub k_values: Vec<usize>,
    pub lambda_values: Vec<f64>,
    pub out_dir: PathBuf,
}

/// One cell of the sweep grid.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SweepPoint {
    pub algorithm: Algorithm,
    pub sub_clusters: usize,
    pub npr_weight: f64,
}

impl SweepPoint {
    fn context(&self, seed: Option<u64>) -> String {
        match seed {
            Some(s) => format!(
                "algorithm={} K={} lambda={} seed={s}",
                self.algorithm,
                self.sub_clusters,
                fmt6(self.npr_weight)
            ),
            None => format!(
                "algorithm={} K={} lambda={}",
                self.algorithm,
                self.sub_clusters,
                fmt6(self.npr_weight)
            ),
        }
    }
}

impl ExperimentSpec {
    /// Grid order is fixed: algorithms outermost, then sub-cluster counts,
    /// then regularizer weights. Output row order follows it.
    pub fn sweep_points(&self) -> Vec<SweepPoint> {
        let mut points = Vec::new();
        for &algorithm in &self.algorithms {
            for &sub_clusters in &self.k_values {
                for &npr_weight in &self.lambda_values {
                    points.push(SweepPoint {
                        algorithm,
                        sub_clusters,
                        npr_weight,
                    });
                }
            }
        }
        points
    }

    /// The federation config for one grid cell and seed.
    pub fn federation_for(&self, point: &SweepPoint, seed: u64) -> FederationConfig {
        FederationConfig {
            algorithm: point.algorithm,
            sub_clusters: point.sub_clusters,
            npr_weight: point.npr_weight,
            seed,
            ..self.base.clone()
        }
    }

    /// Generate, partition, and split this spec's synthetic world for one
    /// seed. Sweep points share worlds: the data never depends on the cell.
    pub fn world_for(&self, seed: u64) -> Result<Vec<ClientDataset>> {
        let data_cfg = SyntheticDataConfig {
            seed,
            ..self.data.clone()
        };
        let dataset = generate_synthetic(&data_cfg)?;
        let part_cfg = PartitionConfig {
            seed,
            ..self.partition.clone()
        };
        dirichlet_partition(&dataset, &part_cfg)?
            .iter()
            .map(|client| stratified_split(client, self.train_fraction))
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.seeds.is_empty() {
            return bad("seed list must be non-empty".into());
        }
        if self.algorithms.is_empty() || self.k_values.is_empty() || self.lambda_values.is_empty() {
            return bad("sweep axes must be non-empty".into());
        }
        let mut seen_seeds = HashSet::new();
        if !self.seeds.iter().all(|s| seen_seeds.insert(*s)) {
            return bad("seed list contains duplicates".into());
        }
        let mut seen_algos = HashSet::new();
        if !self.algorithms.iter().all(|a| seen_algos.insert(*a)) {
            return bad("algorithm axis contains duplicates".into());
        }
        let mut seen_k = HashSet::new();
        if !self.k_values.iter().all(|k| seen_k.insert(*k)) {
            return bad("K axis contains duplicates".into());
        }
        // Lambdas must stay distinct after six-decimal rounding or output
        // rows from different cells would be indistinguishable.
        let mut seen_lambda = HashSet::new();
        if !self.lambda_values.iter().all(|l| seen_lambda.insert(fmt6(*l))) {
            return bad("lambda axis contains values that collide at six decimals".into());
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return bad(format!(
                "train_fraction must lie strictly between 0 and 1, got {}",
                self.train_fraction
            ));
        }
        if self.data.samples_per_class.len() != self.data.n_classes {
            return bad(format!(
                "samples_per_class has {} entries for {} classes",
                self.data.samples_per_class.len(),
                self.data.n_classes
            ));
        }
        if self.partition.dirichlet_alpha_per_class.len() != self.data.n_classes {
            return bad(format!(
                "dirichlet_alpha_per_class has {} entries for {} classes",
                self.partition.dirichlet_alpha_per_class.len(),
                self.data.n_classes
            ));
        }
        if self.base.n_classes != self.data.n_classes
            || self.base.input_dim != self.data.input_dim
            || self.base.n_clients != self.partition.n_clients
        {
            return bad("training config disagrees with data/partition dimensions".into());
        }
        // Every grid cell must be a valid federation config on its own.
        for point in self.sweep_points() {
            self.federation_for(&point, self.seeds[0])
                .validate()
                .map_err(|e| Error::Config(format!("{}: {e}", point.context(None))))?;
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Configuration resolution: defaults → preset → file → flags.

/// Command-line overrides; `None` means "not given". Applied last, on top
/// of defaults, preset, and file.
#[derive(Debug, Clone, Default)]
pub struct CliOverrides {
    pub algorithms: Option<Vec<Algorithm>>,
    pub clients: Option<usize>,
    pub rounds: Option<usize>,
    pub k_values: Option<Vec<usize>>,
    pub lambda_values: Option<Vec<f64>>,
    pub seeds: Option<Vec<u64>>,
    pub out_dir: Option<PathBuf>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct FileConfig {
    data: Option<DataSection>,
    partition: Option<PartitionSection>,
    training: Option<TrainingSection>,
    sinkhorn: Option<SinkhornSection>,
    sweep: Option<SweepSection>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct DataSection {
    n_classes: Option<usize>,
    input_dim: Option<usize>,
    samples_per_class: Option<Vec<usize>>,
    class_mean_separation: Option<f64>,
    noise_scale: Option<f64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct PartitionSection {
    n_clients: Option<usize>,
    dirichlet_alpha_per_class: Option<Vec<f64>>,
    missing_class_prob: Option<f64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct TrainingSection {
    rounds: Option<usize>,
    sub_clusters: Option<usize>,
    npr_weight: Option<f64>,
    base_lr: Option<f64>,
    weight_decay: Option<f64>,
    batch_size: Option<usize>,
    local_epochs: Option<usize>,
    algorithm: Option<String>,
    fedprox_mu: Option<f64>,
    prior_smoothing: Option<f64>,
    npr_only: Option<bool>,
    hidden_dims: Option<Vec<usize>>,
    feature_dim: Option<usize>,
    train_fraction: Option<f64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct SinkhornSection {
    epsilon: Option<f64>,
    max_iters: Option<usize>,
    marginal_tol: Option<f64>,
    harden: Option<bool>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct SweepSection {
    seeds: Option<Vec<u64>>,
    algorithms: Option<Vec<String>>,
    k_values: Option<Vec<usize>>,
    lambda_values: Option<Vec<f64>>,
    out_dir: Option<String>,
}

/// Mutable resolution state; sweep axes stay `None` until something sets
/// them and fall back to singletons of the base values.
struct Draft {
    data: SyntheticDataConfig,
    partition: PartitionConfig,
    train_fraction: f64,
    base: FederationConfig,
    seeds: Vec<u64>,
    algorithms: Option<Vec<Algorithm>>,
    k_values: Option<Vec<usize>>,
    lambda_values: Option<Vec<f64>>,
    out_dir: PathBuf,
}

impl Default for Draft {
    fn default() -> Self {
        Draft {
            data: SyntheticDataConfig {
                n_classes: 8,
                input_dim: 32,
                // Roughly geometric tail: a long-tailed label distribution
                // at desk scale.
                samples_per_class: vec![1000, 400, 160, 64, 26, 10, 4, 2],
                class_mean_separation: 3.0,
                noise_scale: 1.0,
                seed: 0,
            },
            partition: PartitionConfig {
                n_clients: 6,
                dirichlet_alpha_per_class: vec![1.0; 8],
                missing_class_prob: 0.3,
                seed: 0,
            },
            train_fraction: 0.8,
            base: FederationConfig::default(),
            seeds: vec![0],
            algorithms: None,
            k_values: None,
            lambda_values: None,
            out_dir: PathBuf::from("results"),
        }
    }
}

fn apply_preset(draft: &mut Draft, name: &str) -> Result<()> {
    let key = name.strip_prefix("preset:").unwrap_or(name);
    match key {
        // Ten clients, five classes, strongly class-dependent skew: class 0
        // spreads nearly evenly while class 4 lands almost whole at one
        // client, with classes dropped outright at 30% of clients.
        "ich-like" => {
            draft.data = SyntheticDataConfig {
                n_classes: 5,
                input_dim: 32,
                samples_per_class: vec![1280, 660, 400, 600, 60],
                class_mean_separation: 3.0,
                noise_scale: 1.0,
                seed: 0,
            };
            draft.partition = PartitionConfig {
                n_clients: 10,
                dirichlet_alpha_per_class: vec![50.0, 30.0, 10.0, 5.0, 0.5],
                missing_class_prob: 0.3,
                seed: 0,
            };
            draft.base.rounds = 40;
            draft.base.sub_clusters = 2;
            // Tuned for this preset's scale: the prototype pull needs a
            // full-strength weight and a learning rate that converges in 40
            // rounds at ~240 training samples per client.
            draft.base.npr_weight = 1.0;
            draft.base.base_lr = 3e-3;
            draft.seeds = vec![0, 1, 2, 3, 4];
        }
        // Six clients, eight classes with heavy sample-count imbalance
        // between both classes and clients.
        "isic-like" => {
            draft.data = SyntheticDataConfig {
                n_classes: 8,
                input_dim: 32,
                samples_per_class: vec![544, 1473, 432, 113, 316, 31, 31, 60],
                class_mean_separation: 3.0,
                noise_scale: 1.0,
                seed: 0,
            };
            draft.partition = PartitionConfig {
                n_clients: 6,
                dirichlet_alpha_per_class: vec![1.0; 8],
                missing_class_prob: 0.3,
                seed: 0,
            };
            draft.base.rounds = 40;
            draft.base.sub_clusters = 4;
            draft.base.npr_weight = 0.1;
            draft.base.base_lr = 3e-3;
            draft.seeds = vec![0, 1, 2, 3, 4];
        }
        other => {
            return Err(Error::Config(format!(
                "unknown preset {other:?}; available: ich-like, isic-like"
            )))
        }
    }
    Ok(())
}

fn apply_file(draft: &mut Draft, path: &Path) -> Result<()> {
    let text = fs::read_to_string(path)?;
    let file: FileConfig = toml::from_str(&text)
        .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    if let Some(s) = file.data {
        set(&mut draft.data.n_classes, s.n_classes);
        set(&mut draft.data.input_dim, s.input_dim);
        set(&mut draft.data.samples_per_class, s.samples_per_class);
        set(&mut draft.data.class_mean_separation, s.class_mean_separation);
        set(&mut draft.data.noise_scale, s.noise_scale);
    }
    if let Some(s) = file.partition {
        set(&mut draft.partition.n_clients, s.n_clients);
        set(
            &mut draft.partition.dirichlet_alpha_per_class,
            s.dirichlet_alpha_per_class,
        );
        set(&mut draft.partition.missing_class_prob, s.missing_class_prob);
    }
    if let Some(s) = file.training {
        set(&mut draft.base.rounds, s.rounds);
        set(&mut draft.base.sub_clusters, s.sub_clusters);
        set(&mut draft.base.npr_weight, s.npr_weight);
        set(&mut draft.base.base_lr, s.base_lr);
        set(&mut draft.base.weight_decay, s.weight_decay);
        set(&mut draft.base.batch_size, s.batch_size);
        set(&mut draft.base.local_epochs, s.local_epochs);
        if let Some(name) = s.algorithm {
            draft.base.algorithm = name.parse()?;
        }
        set(&mut draft.base.fedprox_mu, s.fedprox_mu);
        set(&mut draft.base.prior_smoothing, s.prior_smoothing);
        set(&mut draft.base.npr_only, s.npr_only);
        set(&mut draft.base.hidden_dims, s.hidden_dims);
        set(&mut draft.base.feature_dim, s.feature_dim);
        set(&mut draft.train_fraction, s.train_fraction);
    }
    if let Some(s) = file.sinkhorn {
        set(&mut draft.base.sinkhorn.epsilon, s.epsilon);
        set(&mut draft.base.sinkhorn.max_iters, s.max_iters);
        set(&mut draft.base.sinkhorn.marginal_tol, s.marginal_tol);
        set(&mut draft.base.sinkhorn.harden, s.harden);
    }
    if let Some(s) = file.sweep {
        set(&mut draft.seeds, s.seeds);
        if let Some(names) = s.algorithms {
            draft.algorithms = Some(
                names
                    .iter()
                    .map(|n| n.parse())
                    .collect::<Result<Vec<Algorithm>>>()?,
            );
        }
        if s.k_values.is_some() {
            draft.k_values = s.k_values;
        }
        if s.lambda_values.is_some() {
            draft.lambda_values = s.lambda_values;
        }
        if let Some(dir) = s.out_dir {
            draft.out_dir = PathBuf::from(dir);
        }
    }
    Ok(())
}

fn set<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}

/// Resolve an [`ExperimentSpec`]: built-in defaults, then the named preset,
/// then the TOML file, then command-line overrides; later sources win.
/// The result is validated, including every sweep cell's federation config.
pub fn parse_config(
    file: Option<&Path>,
    preset: Option<&str>,
    flags: &CliOverrides,
) -> Result<ExperimentSpec> {
    let mut draft = Draft::default();
    if let Some(name) = preset {
        apply_preset(&mut draft, name)?;
    }
    if let Some(path) = file {
        apply_file(&mut draft, path)?;
    }
    if let Some(algos) = &flags.algorithms {
        draft.algorithms = Some(algos.clone());
    }
    set(&mut draft.partition.n_clients, flags.clients);
    set(&mut draft.base.rounds, flags.rounds);
    if flags.k_values.is_some() {
        draft.k_values = flags.k_values.clone();
    }
    if flags.lambda_values.is_some() {
        draft.lambda_values = flags.lambda_values.clone();
    }
    if let Some(seeds) = &flags.seeds {
        draft.seeds = seeds.clone();
    }
    if let Some(dir) = &flags.out_dir {
        draft.out_dir = dir.clone();
    }

    // Dimensions the training config shares with the data recipe are
    // derived, never configured twice.
    draft.base.n_classes = draft.data.n_classes;
    draft.base.input_dim = draft.data.input_dim;
    draft.base.n_clients = draft.partition.n_clients;

    let spec = ExperimentSpec {
        data: draft.data,
        partition: draft.partition,
        train_fraction: draft.train_fraction,
        algorithms: draft
            .algorithms
            .unwrap_or_else(|| vec![draft.base.algorithm]),
        k_values: draft.k_values.unwrap_or_else(|| vec![draft.base.sub_clusters]),
        lambda_values: draft
            .lambda_values
            .unwrap_or_else(|| vec![draft.base.npr_weight]),
        base: draft.base,
        seeds: draft.seeds,
        out_dir: draft.out_dir,
    };
    spec.validate()?;
    Ok(spec)
}

// ---------------------------------------------------------------------------
// Output files.

/// One parsed `records.csv` row. Float fields hold the six-decimal values
/// as written, not the full-precision originals.
#[derive(Debug, Clone, PartialEq)]
pub struct CsvRow {
    pub round: usize,
    pub client: usize,
    pub split: Split,
    pub algorithm: Algorithm,
    pub k: usize,
    pub lambda: f64,
    pub seed: u64,
    pub bacc: f64,
    pub bauc: f64,
    pub loss_sup: f64,
    pub loss_npr: f64,
}

/// Per-sweep-point aggregate: mean and population standard deviation over
/// seeds of the final-round test metrics (each seed contributes the
/// unweighted across-client mean, ignoring NaN clients).
#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRecord {
    pub algorithm: Algorithm,
    pub k: usize,
    pub lambda: f64,
    pub n_seeds: usize,
    pub mean_bacc: f64,
    pub std_bacc: f64,
    pub mean_bauc: f64,
    pub std_bauc: f64,
}

fn fmt6(v: f64) -> String {
    if v.is_nan() {
        "NaN".to_string()
    } else {
        format!("{v:.6}")
    }
}

fn parse6(s: &str) -> std::result::Result<f64, std::num::ParseFloatError> {
    if s == "NaN" {
        Ok(f64::NAN)
    } else {
        s.parse()
    }
}

#[allow(clippy::too_many_arguments)]
fn format_row_line(
    round: usize,
    client: usize,
    split: Split,
    algorithm: Algorithm,
    k: usize,
    lambda: f64,
    seed: u64,
    bacc: f64,
    bauc: f64,
    loss_sup: f64,
    loss_npr: f64,
) -> String {
    format!(
        "{round},{client},{split},{algorithm},{k},{},{seed},{},{},{},{}",
        fmt6(lambda),
        fmt6(bacc),
        fmt6(bauc),
        fmt6(loss_sup),
        fmt6(loss_npr)
    )
}

fn parse_row(line: &str, line_no: usize) -> Result<CsvRow> {
    let bad = |what: &str| Error::Verify(format!("records.csv line {line_no}: {what} in {line:?}"));
    let fields: Vec<&str> = line.split(',').collect();
    if fields.len() != 11 {
        return Err(bad("expected 11 fields"));
    }
    let split = match fields[2] {
        "train" => Split::Train,
        "test" => Split::Test,
        _ => return Err(bad("bad split")),
    };
    Ok(CsvRow {
        round: fields[0].parse().map_err(|_| bad("bad round"))?,
        client: fields[1].parse().map_err(|_| bad("bad client"))?,
        split,
        algorithm: fields[3]
            .parse()
            .map_err(|_| bad("bad algorithm"))?,
        k: fields[4].parse().map_err(|_| bad("bad K"))?,
        lambda: parse6(fields[5]).map_err(|_| bad("bad lambda"))?,
        seed: fields[6].parse().map_err(|_| bad("bad seed"))?,
        bacc: parse6(fields[7]).map_err(|_| bad("bad bacc"))?,
        bauc: parse6(fields[8]).map_err(|_| bad("bad bauc"))?,
        loss_sup: parse6(fields[9]).map_err(|_| bad("bad loss_sup"))?,
        loss_npr: parse6(fields[10]).map_err(|_| bad("bad loss_npr"))?,
    })
}

fn nan_mean(values: &[f64]) -> f64 {
    let finite: Vec<f64> = values.iter().copied().filter(|v| !v.is_nan()).collect();
    if finite.is_empty() {
        f64::NAN
    } else {
        finite.iter().sum::<f64>() / finite.len() as f64
    }
}

fn mean_and_population_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Reduce rows to one [`SummaryRecord`] per sweep point, in first-appearance
/// order. Within a point, each seed's final value is the NaN-skipping mean
/// over clients of the last-round test metric; mean/std run over seeds in
/// first-appearance order.
pub fn summarize(rows: &[CsvRow]) -> Vec<SummaryRecord> {
    let mut point_order: Vec<(Algorithm, usize, u64)> = Vec::new();
    for row in rows {
        let key = (row.algorithm, row.k, row.lambda.to_bits());
        if !point_order.contains(&key) {
            point_order.push(key);
        }
    }
    let mut out = Vec::new();
    for (algorithm, k, lambda_bits) in point_order {
        let lambda = f64::from_bits(lambda_bits);
        let in_point: Vec<&CsvRow> = rows
            .iter()
            .filter(|r| r.algorithm == algorithm && r.k == k && r.lambda.to_bits() == lambda_bits)
            .collect();
        let mut seed_order: Vec<u64> = Vec::new();
        for row in &in_point {
            if !seed_order.contains(&row.seed) {
                seed_order.push(row.seed);
            }
        }
        let mut final_bacc = Vec::new();
        let mut final_bauc = Vec::new();
        for &seed in &seed_order {
            let in_seed: Vec<&&CsvRow> = in_point.iter().filter(|r| r.seed == seed).collect();
            let last_round = in_seed.iter().map(|r| r.round).max().unwrap_or(0);
            let finals: Vec<&&&CsvRow> = in_seed
                .iter()
                .filter(|r| r.round == last_round && r.split == Split::Test)
                .collect();
            final_bacc.push(nan_mean(&finals.iter().map(|r| r.bacc).collect::<Vec<_>>()));
            final_bauc.push(nan_mean(&finals.iter().map(|r| r.bauc).collect::<Vec<_>>()));
        }
        let (mean_bacc, std_bacc) = mean_and_population_std(&final_bacc);
        let (mean_bauc, std_bauc) = mean_and_population_std(&final_bauc);
        out.push(SummaryRecord {
            algorithm,
            k,
            lambda,
            n_seeds: seed_order.len(),
            mean_bacc,
            std_bacc,
            mean_bauc,
            std_bauc,
        });
    }
    out
}

fn format_summary_line(s: &SummaryRecord) -> String {
    format!(
        "algorithm={} K={} lambda={} seeds={} mean_bacc={} std_bacc={} mean_bauc={} std_bauc={}",
        s.algorithm,
        s.k,
        fmt6(s.lambda),
        s.n_seeds,
        fmt6(s.mean_bacc),
        fmt6(s.std_bacc),
        fmt6(s.mean_bauc),
        fmt6(s.std_bauc)
    )
}

/// Write `records.csv` and `summary.txt` under `dir` in one shot. The
/// incremental writer inside [`run_experiment`] produces byte-identical
/// files; this entry point serves tests and external callers that already
/// hold rows.
pub fn emit_results(
    rows: &[CsvRow],
    summaries: &[SummaryRecord],
    dir: &Path,
) -> Result<(PathBuf, PathBuf)> {
    fs::create_dir_all(dir)?;
    let csv_path = dir.join("records.csv");
    let summary_path = dir.join("summary.txt");
    let mut w = BufWriter::new(fs::File::create(&csv_path)?);
    writeln!(w, "{CSV_HEADER}")?;
    for r in rows {
        writeln!(
            w,
            "{}",
            format_row_line(
                r.round, r.client, r.split, r.algorithm, r.k, r.lambda, r.seed, r.bacc, r.bauc,
                r.loss_sup, r.loss_npr
            )
        )?;
    }
    w.flush()?;
    let mut sw = BufWriter::new(fs::File::create(&summary_path)?);
    for s in summaries {
        writeln!(sw, "{}", format_summary_line(s))?;
    }
    sw.flush()?;
    Ok((csv_path, summary_path))
}

#[derive(Debug)]
pub struct ExperimentOutput {
    pub csv_path: PathBuf,
    pub summary_path: PathBuf,
    pub summaries: Vec<SummaryRecord>,
}

/// Worker pool honoring the `FEDNPR_WORKERS` environment variable; absent
/// or empty means one thread per core.
fn build_pool() -> Result<rayon::ThreadPool> {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Ok(v) = std::env::var("FEDNPR_WORKERS") {
        if !v.trim().is_empty() {
            let n: usize = v
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("FEDNPR_WORKERS must be a positive integer, got {v:?}")))?;
            if n == 0 {
                return Err(Error::Config("FEDNPR_WORKERS must be at least 1".into()));
            }
            builder = builder.num_threads(n);
        }
    }
    builder
        .build()
        .map_err(|e| Error::Config(format!("could not build worker pool: {e}")))
}

/// Execute the full sweep: one federation run per (sweep point × seed),
/// seeds in parallel, rows written in deterministic grid order and flushed
/// after every completed run so a failure aborts with partial results on
/// disk. Returns the summary that was written.
pub fn run_experiment(spec: &ExperimentSpec) -> Result<ExperimentOutput> {
    spec.validate()?;
    let pool = build_pool()?;

    // Worlds depend only on the seed; build each once and share it across
    // sweep points.
    let worlds: Vec<Vec<ClientDataset>> = pool.install(|| {
        spec.seeds
            .par_iter()
            .map(|&seed| spec.world_for(seed))
            .collect::<Result<Vec<_>>>()
    })?;

    fs::create_dir_all(&spec.out_dir)?;
    let csv_path = spec.out_dir.join("records.csv");
    let summary_path = spec.out_dir.join("summary.txt");
    let mut w = BufWriter::new(fs::File::create(&csv_path)?);
    writeln!(w, "{CSV_HEADER}")?;

    let mut rows: Vec<CsvRow> = Vec::new();
    for point in spec.sweep_points() {
        let runs: Vec<Result<_>> = pool.install(|| {
            spec.seeds
                .par_iter()
                .zip(&worlds)
                .map(|(&seed, world)| run_federation(&spec.federation_for(&point, seed), world))
                .collect()
        });
        for (&seed, run) in spec.seeds.iter().zip(runs) {
            let server = run.map_err(|e| Error::Run {
                context: point.context(Some(seed)),
                source: Box::new(e),
            })?;
            for rec in &server.history {
                let line = format_row_line(
                    rec.round,
                    rec.client,
                    rec.split,
                    point.algorithm,
                    point.sub_clusters,
                    point.npr_weight,
                    seed,
                    rec.bacc,
                    rec.bauc,
                    rec.loss_sup,
                    rec.loss_npr,
                );
                writeln!(w, "{line}")?;
                // Parse our own line back so the summary sees exactly what
                // a reader of the CSV will see.
                rows.push(parse_row(&line, 0).expect("self-generated row parses"));
            }
            w.flush()?;
        }
    }

    let summaries = summarize(&rows);
    let mut sw = BufWriter::new(fs::File::create(&summary_path)?);
    for s in &summaries {
        writeln!(sw, "{}", format_summary_line(s))?;
    }
    sw.flush()?;
    Ok(ExperimentOutput {
        csv_path,
        summary_path,
        summaries,
    })
}

/// Recompute `summary.txt` from `records.csv` in `dir` and demand byte
/// equality — the consistency check behind the `--verify` flag.
pub fn verify_output<P: AsRef<Path>>(dir: P) -> Result<()> {
    let dir = dir.as_ref();
    let csv_path = dir.join("records.csv");
    let summary_path = dir.join("summary.txt");
    let csv = fs::read_to_string(&csv_path)?;
    let mut lines = csv.lines();
    match lines.next() {
        Some(h) if h == CSV_HEADER => {}
        Some(h) => {
            return Err(Error::Verify(format!(
                "records.csv header mismatch: got {h:?}"
            )))
        }
        None => return Err(Error::Verify("records.csv is empty".into())),
    }
    let rows: Vec<CsvRow> = lines
        .enumerate()
        .map(|(i, line)| parse_row(line, i + 2))
        .collect::<Result<_>>()?;
    let expected: Vec<String> = summarize(&rows).iter().map(format_summary_line).collect();
    let actual = fs::read_to_string(&summary_path)?;
    let actual_lines: Vec<&str> = actual.lines().collect();
    if actual_lines.len() != expected.len() {
        return Err(Error::Verify(format!(
            "summary.txt has {} line(s), records.csv implies {}",
            actual_lines.len(),
            expected.len()
        )));
    }
    for (i, (have, want)) in actual_lines.iter().zip(&expected).enumerate() {
        if have != want {
            return Err(Error::Verify(format!(
                "summary.txt line {} disagrees with records.csv:\n  have: {have}\n  want: {want}",
                i + 1
            )));
        }
    }
    // Trailing content beyond the final newline would have shown up as an
    // extra line above; still insist on exact newline discipline.
    let expected_text: String = expected.iter().map(|l| format!("{l}\n")).collect();
    if actual != expected_text {
        return Err(Error::Verify(
            "summary.txt matches line-wise but not byte-wise (newline discipline)".into(),
        ));
    }
    Ok(())
}
