//! The federated round loop: clients download the global model, refresh
//! their prototype banks, run local Adam epochs on their own objective, and
//! upload parameter deltas that the server combines by sample-count weight.
//!
//! Six algorithm arms share one code path and differ only in which loss
//! terms are active and which tensors travel:
//!
//! * `fedavg` — prior-calibrated supervised loss, full model averaged.
//! * `fedprox` — fedavg plus a proximal pull toward the downloaded params.
//! * `fednpr` — supervised loss plus the prototype regularizer.
//! * `fedprox_npr` — proximal term and prototype regularizer together.
//! * `fednpr_per` — fednpr, but only the extractor is federated; each
//!   client keeps a personal classifier head that never leaves the device.
//! * `local_only` — no communication at all, same total step budget.
//!
//! The only artifacts that ever cross the client boundary are parameter
//! deltas and sample counts; features, labels, prototypes, and personal
//! heads stay local. Runs are bit-deterministic: every random choice comes
//! from a stream keyed by (seed, purpose, client, round), so two arms that
//! are mathematically equivalent (for example the regularizer at λ = 0)
//! produce identical parameter trajectories.

use std::fmt;
use std::io::{BufReader, BufWriter, Read as IoRead, Write as IoWrite};
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;

use crate::clustering::{
    cluster_client, normalize_rows_vjp, normalize_rows_with_norms, PrototypeBank, SinkhornConfig,
};
use crate::data::{ClientDataset, Split};
use crate::error::{Error, Result};
use crate::losses::{balanced_softmax_loss, combined_loss, compute_class_prior, npr_loss, ClassPrior, LossValue};
use crate::matrix::Matrix;
use crate::metrics::{balanced_accuracy, balanced_auc, EvalRecord};
use crate::nn::{adam_step, lr_at_round, AdamState, DenseLayer, GradientSet, ModelConfig, ModelParams};
use crate::rng::{stream_rng, STREAM_BATCH, STREAM_MODEL_INIT};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Algorithm {
    FedNpr,
    FedNprPer,
    FedAvg,
    FedProx,
    FedProxNpr,
    LocalOnly,
}

impl Algorithm {
    /// Arms that cluster features and train against the prototype bank.
    pub fn uses_prototypes(self) -> bool {
        matches!(self, Algorithm::FedNpr | Algorithm::FedNprPer | Algorithm::FedProxNpr)
    }

    /// Arms whose gradient carries μ·(params − downloaded).
    pub fn uses_proximal(self) -> bool {
        matches!(self, Algorithm::FedProx | Algorithm::FedProxNpr)
    }

    /// Arms where the classifier head is personal and never federated.
    pub fn personalizes_head(self) -> bool {
        matches!(self, Algorithm::FedNprPer)
    }

    pub const ALL: [Algorithm; 6] = [
        Algorithm::FedNpr,
        Algorithm::FedNprPer,
        Algorithm::FedAvg,
        Algorithm::FedProx,
        Algorithm::FedProxNpr,
        Algorithm::LocalOnly,
    ];
}

impl fmt::Display for Algorithm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Algorithm::FedNpr => "fednpr",
            Algorithm::FedNprPer => "fednpr_per",
            Algorithm::FedAvg => "fedavg",
            Algorithm::FedProx => "fedprox",
            Algorithm::FedProxNpr => "fedprox_npr",
            Algorithm::LocalOnly => "local_only",
        })
    }
}

impl FromStr for Algorithm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Algorithm> {
        match s {
            "fednpr" => Ok(Algorithm::FedNpr),
            "fednpr_per" => Ok(Algorithm::FedNprPer),
            "fedavg" => Ok(Algorithm::FedAvg),
            "fedprox" => Ok(Algorithm::FedProx),
            "fedprox_npr" => Ok(Algorithm::FedProxNpr),
            "local_only" => Ok(Algorithm::LocalOnly),
            other => Err(Error::Config(format!(
                "unknown algorithm {other:?}; expected one of fednpr, fednpr_per, \
                 fedavg, fedprox, fedprox_npr, local_only"
            ))),
        }
    }
}

/// Everything a federation run needs besides the client datasets.
#[derive(Debug, Clone)]
pub struct FederationConfig {
    pub n_clients: usize,
    pub rounds: usize,
    pub sub_clusters: usize,
    pub npr_weight: f64,
    pub sinkhorn: SinkhornConfig,
    pub base_lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub local_epochs: usize,
    pub algorithm: Algorithm,
    pub fedprox_mu: f64,
    pub seed: u64,
    /// Pseudo-count for the class prior; keeps log-priors finite at clients
    /// with missing classes.
    pub prior_smoothing: f64,
    /// Ablation arm: drop the supervised gradient and train on the
    /// prototype regularizer alone. Only meaningful for prototype arms.
    pub npr_only: bool,
    pub input_dim: usize,
    pub n_classes: usize,
    pub hidden_dims: Vec<usize>,
    pub feature_dim: usize,
}

impl Default for FederationConfig {
    fn default() -> Self {
        FederationConfig {
            n_clients: 6,
            rounds: 40,
            sub_clusters: 4,
            npr_weight: 0.1,
            // Live assignment problems occasionally hit a slow transient
            // (observed: ~8k sweeps to tolerance on a mid-training bank, and
            // strongly regularized features can collapse into even slower
            // cases); only those rare problems pay for the large budget, and
            // the solver's soft landing accepts near-converged marginals at
            // budget exhaustion.
            sinkhorn: SinkhornConfig { max_iters: 100_000, ..SinkhornConfig::default() },
            base_lr: 1e-3,
            weight_decay: 5e-4,
            batch_size: 64,
            local_epochs: 1,
            algorithm: Algorithm::FedNpr,
            fedprox_mu: 0.01,
            seed: 0,
            prior_smoothing: 1.0,
            npr_only: false,
            input_dim: 32,
            n_classes: 8,
            hidden_dims: vec![64, 32],
            feature_dim: 16,
        }
    }
}

impl FederationConfig {
    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            input_dim: self.input_dim,
            hidden_dims: self.hidden_dims.clone(),
            feature_dim: self.feature_dim,
            n_classes: self.n_classes,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.n_clients == 0 {
            return bad("n_clients must be at least 1".into());
        }
        if self.rounds == 0 {
            return bad("rounds must be at least 1".into());
        }
        if self.sub_clusters == 0 {
            return bad("sub_clusters must be at least 1".into());
        }
        if self.local_epochs == 0 {
            return bad("local_epochs must be at least 1".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if !(self.npr_weight >= 0.0 && self.npr_weight.is_finite()) {
            return bad(format!("npr_weight must be finite and non-negative, got {}", self.npr_weight));
        }
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return bad(format!("base_lr must be positive, got {}", self.base_lr));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad(format!("weight_decay must be finite and non-negative, got {}", self.weight_decay));
        }
        if !(self.fedprox_mu >= 0.0 && self.fedprox_mu.is_finite()) {
            return bad(format!("fedprox_mu must be finite and non-negative, got {}", self.fedprox_mu));
        }
        if !(self.prior_smoothing >= 0.0 && self.prior_smoothing.is_finite()) {
            return bad(format!("prior_smoothing must be finite and non-negative, got {}", self.prior_smoothing));
        }
        if self.npr_only && !self.algorithm.uses_prototypes() {
            return bad(format!("npr_only requires a prototype arm, not {}", self.algorithm));
        }
        if self.input_dim == 0 || self.feature_dim == 0 || self.n_classes == 0 {
            return bad("model dimensions must be positive".into());
        }
        Ok(())
    }
}

/// One client's training state between rounds.
pub struct ClientState {
    pub id: usize,
    pub dataset: ClientDataset,
    pub model: ModelParams,
    /// The personal classifier under `fednpr_per`; absent everywhere else.
    pub personal_head: Option<DenseLayer>,
    pub bank: PrototypeBank,
    pub adam: AdamState,
    pub prior: ClassPrior,
}

/// What one client uploads after a round: per-tensor parameter differences
/// (post-update minus downloaded) and its training sample count. Under
/// `fednpr_per` the classifier block is zero — personal heads never leave
/// the client.
#[derive(Debug, Clone)]
pub struct ModelDelta {
    pub extractor: Vec<DenseLayer>,
    pub classifier: DenseLayer,
    pub sample_count: usize,
}

pub struct ServerState {
    pub global_model: ModelParams,
    pub round: usize,
    pub history: Vec<EvalRecord>,
}

/// w_i = count_i / Σ counts.
pub fn compute_client_weights(sample_counts: &[usize]) -> Result<Vec<f64>> {
    if sample_counts.is_empty() {
        return Err(Error::Config("no clients to weight".into()));
    }
    let total: usize = sample_counts.iter().sum();
    if total == 0 {
        return Err(Error::Config("all client sample counts are zero".into()));
    }
    Ok(sample_counts.iter().map(|&c| c as f64 / total as f64).collect())
}

fn check_congruent(global: &ModelParams, delta: &ModelDelta) -> Result<()> {
    let mismatch = |what: String| Error::Shape {
        op: "aggregate",
        expected: "deltas congruent with the global model".into(),
        got: what,
    };
    if delta.extractor.len() != global.extractor.len() {
        return Err(mismatch(format!(
            "{} extractor layers vs {}",
            delta.extractor.len(),
            global.extractor.len()
        )));
    }
    for (d, g) in delta.extractor.iter().zip(&global.extractor) {
        if d.in_dim() != g.in_dim() || d.out_dim() != g.out_dim() {
            return Err(mismatch(format!(
                "extractor layer {}x{} vs {}x{}",
                d.in_dim(),
                d.out_dim(),
                g.in_dim(),
                g.out_dim()
            )));
        }
    }
    if delta.classifier.in_dim() != global.classifier.in_dim()
        || delta.classifier.out_dim() != global.classifier.out_dim()
    {
        return Err(mismatch("classifier shape".into()));
    }
    Ok(())
}

/// global ← global + Σ_i w_i · delta_i, accumulated in client-index order.
pub fn aggregate_full(server: &mut ServerState, deltas: &[ModelDelta]) -> Result<()> {
    let weights = compute_client_weights(&deltas.iter().map(|d| d.sample_count).collect::<Vec<_>>())?;
    for delta in deltas {
        check_congruent(&server.global_model, delta)?;
    }
    for (delta, &w) in deltas.iter().zip(&weights) {
        for (layer, d) in server.global_model.extractor.iter_mut().zip(&delta.extractor) {
            layer.add_scaled(d, w);
        }
        server.global_model.classifier.add_scaled(&delta.classifier, w);
    }
    server.round += 1;
    Ok(())
}

/// Like `aggregate_full` but only extractor tensors move; the server's
/// classifier block stays bit-identical (clients with personal heads never
/// read it back).
pub fn aggregate_extractor_only(server: &mut ServerState, deltas: &[ModelDelta]) -> Result<()> {
    let weights = compute_client_weights(&deltas.iter().map(|d| d.sample_count).collect::<Vec<_>>())?;
    for delta in deltas {
        check_congruent(&server.global_model, delta)?;
    }
    for (delta, &w) in deltas.iter().zip(&weights) {
        for (layer, d) in server.global_model.extractor.iter_mut().zip(&delta.extractor) {
            layer.add_scaled(d, w);
        }
    }
    server.round += 1;
    Ok(())
}

/// Loss terms and gradients for one mini-batch under the configured arm.
fn batch_loss(
    model: &ModelParams,
    x: &Matrix,
    y: &[usize],
    prior: &ClassPrior,
    bank: &PrototypeBank,
    config: &FederationConfig,
) -> Result<(LossValue, Matrix)> {
    let features = model.forward_features(x)?;
    let logits = model.logits_from_features(&features);
    if config.algorithm.uses_prototypes() {
        let (zn, norms) = normalize_rows_with_norms(&features)?;
        let mut lv = combined_loss(&logits, &zn, y, prior, bank, config.npr_weight)?;
        if config.npr_only {
            // Ablation: keep only the regularizer's gradient path.
            lv.logit_grad = Matrix::zeros(lv.logit_grad.rows(), lv.logit_grad.cols());
            lv.total = config.npr_weight * lv.npr_term;
        }
        let raw_grad = normalize_rows_vjp(&zn, &norms, &lv.feature_grad);
        Ok((lv, raw_grad))
    } else {
        let (sup_term, logit_grad) = balanced_softmax_loss(&logits, y, prior)?;
        let lv = LossValue {
            total: sup_term,
            sup_term,
            npr_term: f64::NAN,
            logit_grad,
            feature_grad: Matrix::zeros(features.rows(), features.cols()),
        };
        let raw_grad = Matrix::zeros(features.rows(), features.cols());
        Ok((lv, raw_grad))
    }
}

/// One round of local work: download, refresh prototypes, train, and return
/// the parameter delta. `round` is 1-based and only seeds the batch
/// shuffle stream. Runs zero epochs produce an all-zero delta.
pub fn local_update(
    client: &mut ClientState,
    downloaded: &ModelParams,
    lr: f64,
    round: usize,
    config: &FederationConfig,
) -> Result<ModelDelta> {
    let train_idx = client.dataset.train_idx.clone();
    if train_idx.is_empty() {
        return Err(Error::Config(format!(
            "client {} has an empty training split",
            client.id
        )));
    }

    // (1) Download. Personal-head clients take the extractor only and keep
    // their own classifier; local-only clients never overwrite anything.
    match config.algorithm {
        Algorithm::LocalOnly => {}
        Algorithm::FedNprPer => {
            client.model.extractor = downloaded.extractor.clone();
            if let Some(head) = &client.personal_head {
                client.model.classifier = head.clone();
            }
        }
        _ => client.model = downloaded.clone(),
    }

    // (2) Refresh the prototype bank from the full training split, before
    // any gradient step, using the freshly downloaded extractor.
    let x_train = client.dataset.features.gather_rows(&train_idx);
    let y_train: Vec<usize> = train_idx.iter().map(|&i| client.dataset.labels[i]).collect();
    if config.algorithm.uses_prototypes() {
        let features = client.model.forward_features(&x_train)?;
        client.bank = cluster_client(&features, &y_train, &client.bank, &config.sinkhorn)?;
    }

    // (3) Local epochs of shuffled mini-batch Adam.
    let reference = client.model.clone();
    let mut order: Vec<usize> = (0..train_idx.len()).collect();
    let mut rng = stream_rng(config.seed, STREAM_BATCH, client.id as u64, round as u64);
    for _ in 0..config.local_epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(config.batch_size) {
            let x = x_train.gather_rows(batch);
            let y: Vec<usize> = batch.iter().map(|&i| y_train[i]).collect();
            let (lv, raw_feature_grad) = batch_loss(&client.model, &x, &y, &client.prior, &client.bank, config)?;
            let mut grads = client.model.backward(&x, &lv.logit_grad, &raw_feature_grad)?;
            if config.algorithm.uses_proximal() && config.fedprox_mu != 0.0 {
                add_proximal(&mut grads, &client.model, &reference, config.fedprox_mu);
            }
            adam_step(&mut client.model, &mut client.adam, &grads, lr, config.weight_decay)?;
        }
    }

    if config.algorithm.personalizes_head() {
        client.personal_head = Some(client.model.classifier.clone());
    }

    // (4) Delta against the reference the server knows about. Personal
    // heads stay home: their block reads zero on the wire.
    let extractor: Vec<DenseLayer> = client
        .model
        .extractor
        .iter()
        .zip(&reference.extractor)
        .map(|(now, then)| now.sub(then))
        .collect();
    let classifier = if config.algorithm.personalizes_head() {
        DenseLayer::zeros(reference.classifier.in_dim(), reference.classifier.out_dim())
    } else {
        client.model.classifier.sub(&reference.classifier)
    };
    Ok(ModelDelta {
        extractor,
        classifier,
        sample_count: train_idx.len(),
    })
}

/// grads += μ·(params − reference), every tensor.
fn add_proximal(grads: &mut GradientSet, params: &ModelParams, reference: &ModelParams, mu: f64) {
    let pull = |g: &mut DenseLayer, p: &DenseLayer, r: &DenseLayer| {
        for ((gv, pv), rv) in g
            .weight
            .data_mut()
            .iter_mut()
            .zip(p.weight.data())
            .zip(r.weight.data())
        {
            *gv += mu * (pv - rv);
        }
        for ((gv, pv), rv) in g.bias.iter_mut().zip(&p.bias).zip(&r.bias) {
            *gv += mu * (pv - rv);
        }
    };
    for ((g, p), r) in grads
        .extractor
        .iter_mut()
        .zip(&params.extractor)
        .zip(&reference.extractor)
    {
        pull(g, p, r);
    }
    pull(&mut grads.classifier, &params.classifier, &reference.classifier);
}

/// Row-wise softmax probabilities and argmax predictions from raw logits.
fn probabilities_and_predictions(logits: &Matrix) -> (Matrix, Vec<usize>) {
    let (n, c) = (logits.rows(), logits.cols());
    let mut probs = Matrix::zeros(n, c);
    let mut preds = Vec::with_capacity(n);
    for i in 0..n {
        let row = logits.row(i);
        let mut best = 0;
        for (j, &v) in row.iter().enumerate() {
            if v > row[best] {
                best = j;
            }
        }
        preds.push(best);
        let m = row[best];
        let denom: f64 = row.iter().map(|&v| (v - m).exp()).sum();
        for (out, &v) in probs.row_mut(i).iter_mut().zip(row) {
            *out = (v - m).exp() / denom;
        }
    }
    (probs, preds)
}

/// Metrics of `model` on one split of one client's data. The prototype
/// regularizer is reported against the client's current bank for prototype
/// arms and NaN otherwise.
fn evaluate(
    model: &ModelParams,
    client: &ClientState,
    split: Split,
    round: usize,
    config: &FederationConfig,
) -> Result<Option<EvalRecord>> {
    let idx = match split {
        Split::Train => &client.dataset.train_idx,
        Split::Test => &client.dataset.test_idx,
    };
    if idx.is_empty() {
        return Ok(None);
    }
    let x = client.dataset.features.gather_rows(idx);
    let y: Vec<usize> = idx.iter().map(|&i| client.dataset.labels[i]).collect();
    let features = model.forward_features(&x)?;
    let logits = model.logits_from_features(&features);
    let (probs, preds) = probabilities_and_predictions(&logits);
    let (bacc, per_class_acc) = balanced_accuracy(&preds, &y, config.n_classes)?;
    let (bauc, per_class_auc) = balanced_auc(&probs, &y, config.n_classes)?;
    let (loss_sup, _) = balanced_softmax_loss(&logits, &y, &client.prior)?;
    let loss_npr = if config.algorithm.uses_prototypes() {
        let (zn, _) = normalize_rows_with_norms(&features)?;
        npr_loss(&zn, &y, &client.bank)?.0
    } else {
        f64::NAN
    };
    Ok(Some(EvalRecord {
        client: client.id,
        round,
        split,
        bacc,
        bauc,
        per_class_acc,
        per_class_auc,
        loss_sup,
        loss_npr,
    }))
}

/// T rounds of synchronous, full-participation federation.
///
/// Every round: all clients run `local_update` at the scheduled learning
/// rate, the server aggregates (full model, extractor-only, or not at all
/// depending on the arm), and every client is evaluated on both splits with
/// the model it would actually serve — global, global-extractor-plus-
/// personal-head, or its own local model.
pub fn run_federation(config: &FederationConfig, datasets: &[ClientDataset]) -> Result<ServerState> {
    config.validate()?;
    if datasets.len() != config.n_clients {
        return Err(Error::Config(format!(
            "config names {} clients but {} datasets were supplied",
            config.n_clients,
            datasets.len()
        )));
    }
    for ds in datasets {
        if ds.n_classes != config.n_classes {
            return Err(Error::Config(format!(
                "dataset has {} classes, config expects {}",
                ds.n_classes, config.n_classes
            )));
        }
        if ds.features.cols() != config.input_dim {
            return Err(Error::Config(format!(
                "dataset features are {}-dimensional, config expects {}",
                ds.features.cols(),
                config.input_dim
            )));
        }
    }

    let mut init_rng = stream_rng(config.seed, STREAM_MODEL_INIT, 0, 0);
    let global = ModelParams::init(&config.model_config(), &mut init_rng);

    let mut clients = Vec::with_capacity(datasets.len());
    for (id, dataset) in datasets.iter().enumerate() {
        let counts = crate::data::class_counts(dataset, Split::Train);
        if counts.iter().sum::<usize>() == 0 {
            return Err(Error::Config(format!(
                "client {id} has an empty training split; run stratified_split first"
            )));
        }
        let prior = compute_class_prior(&counts, config.prior_smoothing)?;
        let model = global.clone();
        let adam = AdamState::new(&model);
        clients.push(ClientState {
            id,
            dataset: dataset.clone(),
            personal_head: config
                .algorithm
                .personalizes_head()
                .then(|| global.classifier.clone()),
            bank: PrototypeBank::new(config.n_classes, config.sub_clusters),
            model,
            adam,
            prior,
        });
    }

    let mut server = ServerState {
        global_model: global,
        round: 0,
        history: Vec::new(),
    };

    for t in 1..=config.rounds {
        let lr = lr_at_round(config.base_lr, t, config.rounds);
        let mut deltas = Vec::with_capacity(clients.len());
        for client in clients.iter_mut() {
            let delta = local_update(client, &server.global_model, lr, t, config)?;
            deltas.push(delta);
        }
        match config.algorithm {
            Algorithm::LocalOnly => {
                server.round += 1;
            }
            Algorithm::FedNprPer => aggregate_extractor_only(&mut server, &deltas)?,
            _ => aggregate_full(&mut server, &deltas)?,
        }

        for client in &clients {
            let eval_model: ModelParams = match config.algorithm {
                Algorithm::LocalOnly => client.model.clone(),
                Algorithm::FedNprPer => ModelParams {
                    extractor: server.global_model.extractor.clone(),
                    classifier: client
                        .personal_head
                        .as_ref()
                        .expect("personal head exists under fednpr_per")
                        .clone(),
                },
                _ => server.global_model.clone(),
            };
            for split in [Split::Train, Split::Test] {
                if let Some(record) = evaluate(&eval_model, client, split, t, config)? {
                    server.history.push(record);
                }
            }
        }
    }
    Ok(server)
}

const PAYLOAD_MAGIC: &[u8] = b"FEDNPR-DELTA-v1\n";

/// Serializes one round's deltas: the magic line, a u32 client count, then
/// per client a u64 sample count, a u32 tensor count, and per tensor a
/// length-prefixed path (`extractor.<i>.weight`, `extractor.<i>.bias`,
/// `classifier.weight`, `classifier.bias`), u32 rows, u32 cols, and
/// row-major f64 values. All integers and floats are little-endian.
pub fn write_round_payload<P: AsRef<Path>>(path: P, deltas: &[ModelDelta]) -> Result<()> {
    let file = std::fs::File::create(path)?;
    let mut w = BufWriter::new(file);
    w.write_all(PAYLOAD_MAGIC)?;
    w.write_all(&(deltas.len() as u32).to_le_bytes())?;
    for delta in deltas {
        w.write_all(&(delta.sample_count as u64).to_le_bytes())?;
        let tensors = tensor_paths(delta);
        w.write_all(&(tensors.len() as u32).to_le_bytes())?;
        for (path, rows, cols, values) in tensors {
            let bytes = path.as_bytes();
            w.write_all(&(bytes.len() as u16).to_le_bytes())?;
            w.write_all(bytes)?;
            w.write_all(&(rows as u32).to_le_bytes())?;
            w.write_all(&(cols as u32).to_le_bytes())?;
            for v in values {
                w.write_all(&v.to_le_bytes())?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

/// Flattened (path, rows, cols, values) view of a delta, in wire order.
fn tensor_paths(delta: &ModelDelta) -> Vec<(String, usize, usize, Vec<f64>)> {
    let mut out = Vec::new();
    for (i, layer) in delta.extractor.iter().enumerate() {
        out.push((
            format!("extractor.{i}.weight"),
            layer.weight.rows(),
            layer.weight.cols(),
            layer.weight.data().to_vec(),
        ));
        out.push((format!("extractor.{i}.bias"), 1, layer.bias.len(), layer.bias.clone()));
    }
    out.push((
        "classifier.weight".into(),
        delta.classifier.weight.rows(),
        delta.classifier.weight.cols(),
        delta.classifier.weight.data().to_vec(),
    ));
    out.push((
        "classifier.bias".into(),
        1,
        delta.classifier.bias.len(),
        delta.classifier.bias.clone(),
    ));
    out
}

pub fn read_round_payload<P: AsRef<Path>>(path: P) -> Result<Vec<ModelDelta>> {
    let file = std::fs::File::open(path)?;
    let mut r = BufReader::new(file);
    let mut magic = [0u8; 16];
    r.read_exact(&mut magic)
        .map_err(|_| Error::Payload("file too short for a delta payload header".into()))?;
    if magic != PAYLOAD_MAGIC {
        return Err(Error::Payload("missing FEDNPR-DELTA-v1 header".into()));
    }
    let n_clients = read_u32(&mut r)? as usize;
    let mut deltas = Vec::with_capacity(n_clients);
    for _ in 0..n_clients {
        let sample_count = read_u64(&mut r)? as usize;
        let n_tensors = read_u32(&mut r)? as usize;
        let mut extractor_weights: Vec<(usize, Matrix)> = Vec::new();
        let mut extractor_biases: Vec<(usize, Vec<f64>)> = Vec::new();
        let mut classifier_weight = None;
        let mut classifier_bias = None;
        for _ in 0..n_tensors {
            let path_len = read_u16(&mut r)? as usize;
            let mut path_bytes = vec![0u8; path_len];
            r.read_exact(&mut path_bytes)
                .map_err(|_| Error::Payload("truncated tensor path".into()))?;
            let path = String::from_utf8(path_bytes)
                .map_err(|_| Error::Payload("tensor path is not UTF-8".into()))?;
            let rows = read_u32(&mut r)? as usize;
            let cols = read_u32(&mut r)? as usize;
            let mut values = vec![0.0f64; rows * cols];
            let mut buf = [0u8; 8];
            for v in values.iter_mut() {
                r.read_exact(&mut buf)
                    .map_err(|_| Error::Payload("truncated tensor values".into()))?;
                *v = f64::from_le_bytes(buf);
            }
            let parts: Vec<&str> = path.split('.').collect();
            match parts.as_slice() {
                ["extractor", i, "weight"] => {
                    let i: usize = i.parse().map_err(|_| Error::Payload(format!("bad path {path:?}")))?;
                    extractor_weights.push((i, Matrix::from_vec(rows, cols, values)));
                }
                ["extractor", i, "bias"] => {
                    let i: usize = i.parse().map_err(|_| Error::Payload(format!("bad path {path:?}")))?;
                    extractor_biases.push((i, values));
                }
                ["classifier", "weight"] => classifier_weight = Some(Matrix::from_vec(rows, cols, values)),
                ["classifier", "bias"] => classifier_bias = Some(values),
                _ => return Err(Error::Payload(format!("unknown tensor path {path:?}"))),
            }
        }
        extractor_weights.sort_by_key(|&(i, _)| i);
        extractor_biases.sort_by_key(|&(i, _)| i);
        if extractor_weights.len() != extractor_biases.len() {
            return Err(Error::Payload("extractor weights and biases disagree".into()));
        }
        let extractor: Vec<DenseLayer> = extractor_weights
            .into_iter()
            .zip(extractor_biases)
            .map(|((wi, weight), (bi, bias))| {
                if wi != bi || weight.cols() != bias.len() {
                    return Err(Error::Payload("mismatched extractor tensor pair".into()));
                }
                Ok(DenseLayer { weight, bias })
            })
            .collect::<Result<_>>()?;
        let (weight, bias) = match (classifier_weight, classifier_bias) {
            (Some(w), Some(b)) => (w, b),
            _ => return Err(Error::Payload("payload is missing classifier tensors".into())),
        };
        if weight.cols() != bias.len() {
            return Err(Error::Payload("classifier weight and bias disagree".into()));
        }
        deltas.push(ModelDelta {
            extractor,
            classifier: DenseLayer { weight, bias },
            sample_count,
        });
    }
    Ok(deltas)
}

fn read_u16(r: &mut impl IoRead) -> Result<u16> {
    let mut buf = [0u8; 2];
    r.read_exact(&mut buf).map_err(|_| Error::Payload("truncated integer".into()))?;
    Ok(u16::from_le_bytes(buf))
}

fn read_u32(r: &mut impl IoRead) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf).map_err(|_| Error::Payload("truncated integer".into()))?;
    Ok(u32::from_le_bytes(buf))
}

fn read_u64(r: &mut impl IoRead) -> Result<u64> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf).map_err(|_| Error::Payload("truncated integer".into()))?;
    Ok(u64::from_le_bytes(buf))
}
