//! Synthetic labeled data and its federated partitioning: per-class
//! Dirichlet allocation across clients, random class removal with
//! within-class redistribution, stratified train/test splitting, and a
//! plain-text export format for fixtures.

use std::fmt;
use std::io::{BufRead, BufReader, BufWriter, Write as IoWrite};
use std::path::Path;

use rand::Rng;
use rand_distr::{Gamma, StandardNormal};

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::rng::{stream_rng, STREAM_DATA, STREAM_PARTITION};

/// Which side of the train/test split to read.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Test => "test",
        })
    }
}

/// Gaussian class blobs at seeded random directions.
///
/// Class c draws `samples_per_class[c]` points from an isotropic Gaussian
/// centered at `class_mean_separation` times a random unit direction, with
/// `noise_scale` standard deviation per coordinate.
#[derive(Debug, Clone)]
pub struct SyntheticDataConfig {
    pub n_classes: usize,
    pub input_dim: usize,
    pub samples_per_class: Vec<usize>,
    pub class_mean_separation: f64,
    pub noise_scale: f64,
    pub seed: u64,
}

/// Global labeled dataset, grouped by class in generation order.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub features: Matrix,
    pub labels: Vec<usize>,
    pub n_classes: usize,
    /// C×d matrix of the true blob centers, kept for diagnostics and tests.
    pub class_means: Matrix,
}

/// One client's shard with its stratified split.
///
/// `train_idx`/`test_idx` index rows of `features`; a freshly partitioned
/// client has both empty until `stratified_split` fills them. Stored
/// per-split counts always equal a recount of the labels behind the index
/// sets.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientDataset {
    pub features: Matrix,
    pub labels: Vec<usize>,
    pub n_classes: usize,
    pub train_idx: Vec<usize>,
    pub test_idx: Vec<usize>,
    pub train_class_counts: Vec<usize>,
    pub test_class_counts: Vec<usize>,
}

/// Dirichlet partition of a dataset across clients.
///
/// Per class the client shares come from Dirichlet(α_c·1_N); afterwards each
/// (client, class) cell is independently dropped with `missing_class_prob`
/// and its samples move to the surviving clients in proportion to their
/// shares, so the global histogram is conserved exactly.
#[derive(Debug, Clone)]
pub struct PartitionConfig {
    pub n_clients: usize,
    pub dirichlet_alpha_per_class: Vec<f64>,
    pub missing_class_prob: f64,
    pub seed: u64,
}

pub fn generate_synthetic(config: &SyntheticDataConfig) -> Result<Dataset> {
    if config.n_classes == 0 {
        return Err(Error::Config("need at least one class".into()));
    }
    if config.input_dim < 2 {
        return Err(Error::Config(format!(
            "input_dim must be at least 2, got {}",
            config.input_dim
        )));
    }
    if config.samples_per_class.len() != config.n_classes {
        return Err(Error::Config(format!(
            "samples_per_class has {} entries for {} classes",
            config.samples_per_class.len(),
            config.n_classes
        )));
    }
    if !(config.class_mean_separation.is_finite() && config.noise_scale.is_finite())
        || config.class_mean_separation < 0.0
        || config.noise_scale < 0.0
    {
        return Err(Error::Config(
            "separation and noise scale must be finite and non-negative".into(),
        ));
    }

    let (c, d) = (config.n_classes, config.input_dim);
    let mut rng = stream_rng(config.seed, STREAM_DATA, 0, 0);

    // All class means first, then samples class by class, so adding samples
    // to one class never moves another class's blob.
    let mut class_means = Matrix::zeros(c, d);
    for class in 0..c {
        loop {
            let mut norm2 = 0.0;
            for v in class_means.row_mut(class) {
                *v = rng.sample::<f64, _>(StandardNormal);
                norm2 += *v * *v;
            }
            let norm = norm2.sqrt();
            if norm > 1e-12 {
                let s = config.class_mean_separation / norm;
                for v in class_means.row_mut(class) {
                    *v *= s;
                }
                break;
            }
        }
    }

    let total: usize = config.samples_per_class.iter().sum();
    let mut features = Matrix::zeros(total, d);
    let mut labels = Vec::with_capacity(total);
    let mut row = 0;
    for class in 0..c {
        for _ in 0..config.samples_per_class[class] {
            let out = features.row_mut(row);
            for (v, &m) in out.iter_mut().zip(class_means.row(class)) {
                *v = m + config.noise_scale * rng.sample::<f64, _>(StandardNormal);
            }
            labels.push(class);
            row += 1;
        }
    }
    Ok(Dataset {
        features,
        labels,
        n_classes: c,
        class_means,
    })
}

pub fn dirichlet_partition(dataset: &Dataset, config: &PartitionConfig) -> Result<Vec<ClientDataset>> {
    let c = dataset.n_classes;
    let n = config.n_clients;
    if n == 0 {
        return Err(Error::Config("need at least one client".into()));
    }
    if config.dirichlet_alpha_per_class.len() != c {
        return Err(Error::Config(format!(
            "{} alpha entries for {} classes",
            config.dirichlet_alpha_per_class.len(),
            c
        )));
    }
    if config.dirichlet_alpha_per_class.iter().any(|&a| !(a > 0.0 && a.is_finite())) {
        return Err(Error::Config("all Dirichlet alphas must be positive and finite".into()));
    }
    if !(0.0..1.0).contains(&config.missing_class_prob) {
        return Err(Error::Config(format!(
            "missing_class_prob must lie in [0, 1), got {}",
            config.missing_class_prob
        )));
    }
    if dataset.labels.is_empty() {
        return Err(Error::Partition("cannot partition an empty dataset".into()));
    }

    // Sample indices per class, in dataset order.
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); c];
    for (i, &y) in dataset.labels.iter().enumerate() {
        if y >= c {
            return Err(Error::LabelOutOfRange { label: y, n_classes: c });
        }
        by_class[y].push(i);
    }

    let gammas: Vec<Gamma<f64>> = config
        .dirichlet_alpha_per_class
        .iter()
        .map(|&a| Gamma::new(a, 1.0).map_err(|e| Error::Config(format!("bad alpha {a}: {e}"))))
        .collect::<Result<_>>()?;

    let mut rng = stream_rng(config.seed, STREAM_PARTITION, 0, 0);
    'attempt: for _ in 0..100 {
        // Dirichlet shares per class.
        let mut shares = vec![vec![0.0; n]; c];
        for class in 0..c {
            let mut sum = 0.0;
            for s in shares[class].iter_mut() {
                *s = rng.sample(&gammas[class]);
                sum += *s;
            }
            if !(sum > 0.0 && sum.is_finite()) {
                continue 'attempt;
            }
            for s in shares[class].iter_mut() {
                *s /= sum;
            }
        }

        // Multinomial assignment of each sample to a client.
        let mut assignment = vec![0usize; dataset.labels.len()];
        for class in 0..c {
            for &i in &by_class[class] {
                assignment[i] = pick(&shares[class], rng.gen::<f64>());
            }
        }

        // Drop each (client, class) cell independently; all N·C decisions
        // are drawn even when a retry is already certain, so the stream
        // position after an attempt never depends on the outcome order.
        let mut masked = vec![vec![false; c]; n];
        for client_mask in masked.iter_mut() {
            for m in client_mask.iter_mut() {
                *m = rng.gen_bool(config.missing_class_prob);
            }
        }

        // Move samples off masked clients, proportionally to the surviving
        // shares of the same class.
        for class in 0..c {
            if by_class[class].is_empty() {
                continue;
            }
            let survivors: Vec<usize> = (0..n).filter(|&cl| !masked[cl][class]).collect();
            if survivors.is_empty() {
                continue 'attempt;
            }
            let mut kept: Vec<f64> = survivors.iter().map(|&cl| shares[class][cl]).collect();
            let sum: f64 = kept.iter().sum();
            if !(sum > 0.0) {
                continue 'attempt;
            }
            for s in kept.iter_mut() {
                *s /= sum;
            }
            for &i in &by_class[class] {
                if masked[assignment[i]][class] {
                    assignment[i] = survivors[pick(&kept, rng.gen::<f64>())];
                }
            }
        }

        // Every client must end up with at least one sample.
        let mut counts = vec![0usize; n];
        for &a in &assignment {
            counts[a] += 1;
        }
        if counts.iter().any(|&ct| ct == 0) {
            continue 'attempt;
        }

        let mut clients = Vec::with_capacity(n);
        for client in 0..n {
            let rows: Vec<usize> = (0..dataset.labels.len())
                .filter(|&i| assignment[i] == client)
                .collect();
            let features = dataset.features.gather_rows(&rows);
            let labels: Vec<usize> = rows.iter().map(|&i| dataset.labels[i]).collect();
            clients.push(ClientDataset {
                features,
                labels,
                n_classes: c,
                train_idx: Vec::new(),
                test_idx: Vec::new(),
                train_class_counts: vec![0; c],
                test_class_counts: vec![0; c],
            });
        }
        return Ok(clients);
    }
    Err(Error::Partition(
        "no valid partition in 100 attempts; raise sample counts, lower \
         missing_class_prob, or add clients"
            .into(),
    ))
}

/// First index whose cumulative share exceeds `u`; the last index catches
/// rounding residue at u ≈ 1.
fn pick(shares: &[f64], u: f64) -> usize {
    let mut cum = 0.0;
    for (i, &s) in shares.iter().enumerate() {
        cum += s;
        if u < cum {
            return i;
        }
    }
    shares.len() - 1
}

/// Order-based stratified split: per class the first
/// max(1, floor(n_c·train_fraction)) samples go to train and the rest to
/// test; a single-sample class goes entirely to train. No randomness — the
/// partition already shuffled within each class.
pub fn stratified_split(client: &ClientDataset, train_fraction: f64) -> Result<ClientDataset> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::Config(format!(
            "train_fraction must lie strictly between 0 and 1, got {train_fraction}"
        )));
    }
    if client.labels.is_empty() {
        return Err(Error::Degenerate {
            op: "stratified_split",
            detail: "client has no samples".into(),
        });
    }
    let c = client.n_classes;
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); c];
    for (i, &y) in client.labels.iter().enumerate() {
        if y >= c {
            return Err(Error::LabelOutOfRange { label: y, n_classes: c });
        }
        by_class[y].push(i);
    }
    let mut out = client.clone();
    out.train_idx.clear();
    out.test_idx.clear();
    for indices in &by_class {
        match indices.len() {
            0 => {}
            1 => out.train_idx.push(indices[0]),
            n_c => {
                let take = ((n_c as f64 * train_fraction).floor() as usize).max(1);
                out.train_idx.extend_from_slice(&indices[..take]);
                out.test_idx.extend_from_slice(&indices[take..]);
            }
        }
    }
    out.train_idx.sort_unstable();
    out.test_idx.sort_unstable();
    out.train_class_counts = histogram(&out.train_idx, &out.labels, c);
    out.test_class_counts = histogram(&out.test_idx, &out.labels, c);
    Ok(out)
}

fn histogram(indices: &[usize], labels: &[usize], c: usize) -> Vec<usize> {
    let mut h = vec![0; c];
    for &i in indices {
        h[labels[i]] += 1;
    }
    h
}

/// Exact label histogram of one split, recomputed from the index set.
pub fn class_counts(client: &ClientDataset, split: Split) -> Vec<usize> {
    let idx = match split {
        Split::Train => &client.train_idx,
        Split::Test => &client.test_idx,
    };
    histogram(idx, &client.labels, client.n_classes)
}

const DATASET_MAGIC: &str = "fednpr-dataset-v1";

/// Writes all clients as plain text: a header line, then one line per
/// sample (`client split label feature...`). Floats print in shortest
/// round-trip form, so import reproduces every bit.
pub fn export_dataset<P: AsRef<Path>>(clients: &[ClientDataset], path: P) -> Result<()> {
    if clients.is_empty() {
        return Err(Error::Config("nothing to export".into()));
    }
    let dims = clients[0].features.cols();
    let n_classes = clients[0].n_classes;
    let samples: usize = clients.iter().map(|cl| cl.labels.len()).sum();
    let file = std::fs::File::create(path)?;
    let mut w = BufWriter::new(file);
    writeln!(
        w,
        "{DATASET_MAGIC} dims={dims} classes={n_classes} clients={} samples={samples}",
        clients.len()
    )?;
    for (id, cl) in clients.iter().enumerate() {
        if cl.features.cols() != dims || cl.n_classes != n_classes {
            return Err(Error::Shape {
                op: "export_dataset",
                expected: format!("{dims} dims, {n_classes} classes"),
                got: format!("{} dims, {} classes at client {id}", cl.features.cols(), cl.n_classes),
            });
        }
        let mut split_of = vec![None; cl.labels.len()];
        for &i in &cl.train_idx {
            split_of[i] = Some(Split::Train);
        }
        for &i in &cl.test_idx {
            split_of[i] = Some(Split::Test);
        }
        for (i, &label) in cl.labels.iter().enumerate() {
            let split = match split_of[i] {
                Some(s) => s.to_string(),
                None => "none".to_string(),
            };
            write!(w, "{id} {split} {label}")?;
            for v in cl.features.row(i) {
                write!(w, " {v}")?;
            }
            writeln!(w)?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn import_dataset<P: AsRef<Path>>(path: P) -> Result<Vec<ClientDataset>> {
    let file = std::fs::File::open(path)?;
    let mut lines = BufReader::new(file).lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::Payload("dataset file is empty".into()))??;
    let mut fields = header.split_whitespace();
    if fields.next() != Some(DATASET_MAGIC) {
        return Err(Error::Payload(format!(
            "not a {DATASET_MAGIC} file: {header:?}"
        )));
    }
    let mut dims = None;
    let mut classes = None;
    let mut n_clients = None;
    let mut samples = None;
    for f in fields {
        let (key, value) = f
            .split_once('=')
            .ok_or_else(|| Error::Payload(format!("bad header field {f:?}")))?;
        let value: usize = value
            .parse()
            .map_err(|_| Error::Payload(format!("bad header value {f:?}")))?;
        match key {
            "dims" => dims = Some(value),
            "classes" => classes = Some(value),
            "clients" => n_clients = Some(value),
            "samples" => samples = Some(value),
            _ => return Err(Error::Payload(format!("unknown header field {key:?}"))),
        }
    }
    let (dims, classes, n_clients, samples) = match (dims, classes, n_clients, samples) {
        (Some(d), Some(c), Some(n), Some(s)) => (d, c, n, s),
        _ => return Err(Error::Payload("header is missing a field".into())),
    };
    if n_clients == 0 {
        return Err(Error::Payload("header declares zero clients".into()));
    }

    struct Partial {
        rows: Vec<Vec<f64>>,
        labels: Vec<usize>,
        splits: Vec<Option<Split>>,
    }
    let mut partials: Vec<Partial> = (0..n_clients)
        .map(|_| Partial { rows: Vec::new(), labels: Vec::new(), splits: Vec::new() })
        .collect();
    let mut seen = 0usize;
    for (lineno, line) in lines.enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let mut parts = line.split_whitespace();
        let bad = |what: &str| Error::Payload(format!("line {}: {what}", lineno + 2));
        let client: usize = parts.next().ok_or_else(|| bad("missing client id"))?.parse().map_err(|_| bad("bad client id"))?;
        if client >= n_clients {
            return Err(bad("client id out of range"));
        }
        let split = match parts.next().ok_or_else(|| bad("missing split"))? {
            "train" => Some(Split::Train),
            "test" => Some(Split::Test),
            "none" => None,
            other => return Err(Error::Payload(format!("line {}: unknown split {other:?}", lineno + 2))),
        };
        let label: usize = parts.next().ok_or_else(|| bad("missing label"))?.parse().map_err(|_| bad("bad label"))?;
        if label >= classes {
            return Err(bad("label out of range"));
        }
        let row: Vec<f64> = parts
            .map(|t| t.parse().map_err(|_| bad("bad feature value")))
            .collect::<Result<_>>()?;
        if row.len() != dims {
            return Err(bad("wrong feature count"));
        }
        let p = &mut partials[client];
        p.rows.push(row);
        p.labels.push(label);
        p.splits.push(split);
        seen += 1;
    }
    if seen != samples {
        return Err(Error::Payload(format!(
            "header declares {samples} samples, file has {seen}"
        )));
    }

    let mut clients = Vec::with_capacity(n_clients);
    for p in partials {
        if p.rows.is_empty() {
            return Err(Error::Payload("a declared client has no samples".into()));
        }
        let features = Matrix::from_rows(&p.rows);
        let mut train_idx = Vec::new();
        let mut test_idx = Vec::new();
        for (i, s) in p.splits.iter().enumerate() {
            match s {
                Some(Split::Train) => train_idx.push(i),
                Some(Split::Test) => test_idx.push(i),
                None => {}
            }
        }
        let train_class_counts = histogram(&train_idx, &p.labels, classes);
        let test_class_counts = histogram(&test_idx, &p.labels, classes);
        clients.push(ClientDataset {
            features,
            labels: p.labels,
            n_classes: classes,
            train_idx,
            test_idx,
            train_class_counts,
            test_class_counts,
        });
    }
    Ok(clients)
}
