//! Dense feed-forward model shared by every federation algorithm.
//!
//! The network is a small MLP: ReLU hidden layers, then a linear feature
//! layer, then a linear classifier head on the features. Weights are stored
//! `(in_dim × out_dim)` so a batched forward pass is `x · w + b` with
//! row-major batches. Training uses Adam with decoupled weight decay and a
//! fixed step-decay learning-rate schedule.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::matrix::Matrix;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub input_dim: usize,
    pub hidden_dims: Vec<usize>,
    pub feature_dim: usize,
    pub n_classes: usize,
}

impl ModelConfig {
    /// Standard architecture: 64/32 hidden units, 16-dim feature space.
    pub fn new(input_dim: usize, n_classes: usize) -> Self {
        ModelConfig {
            input_dim,
            hidden_dims: vec![64, 32],
            feature_dim: 16,
            n_classes,
        }
    }

    /// (in, out) for every layer in network order, classifier last.
    fn layer_dims(&self) -> Vec<(usize, usize)> {
        let mut dims = Vec::with_capacity(self.hidden_dims.len() + 2);
        let mut prev = self.input_dim;
        for &h in &self.hidden_dims {
            dims.push((prev, h));
            prev = h;
        }
        dims.push((prev, self.feature_dim));
        dims.push((self.feature_dim, self.n_classes));
        dims
    }
}

/// One affine layer. Doubles as the shape-matched container for gradients,
/// optimizer moments, and model deltas.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer {
    pub weight: Matrix,
    pub bias: Vec<f64>,
}

impl DenseLayer {
    pub fn zeros(in_dim: usize, out_dim: usize) -> Self {
        DenseLayer {
            weight: Matrix::zeros(in_dim, out_dim),
            bias: vec![0.0; out_dim],
        }
    }

    fn init(in_dim: usize, out_dim: usize, rng: &mut ChaCha8Rng) -> Self {
        // He-style uniform bound keeps ReLU activations near unit scale.
        let bound = (6.0 / in_dim as f64).sqrt();
        let mut weight = Matrix::zeros(in_dim, out_dim);
        for v in weight.data_mut() {
            *v = rng.gen_range(-bound..bound);
        }
        DenseLayer {
            weight,
            bias: vec![0.0; out_dim],
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.rows()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.cols()
    }

    /// `x · w + b`, one output row per input row.
    pub fn forward(&self, x: &Matrix) -> Matrix {
        let mut out = x.matmul(&self.weight);
        for r in 0..out.rows() {
            for (v, b) in out.row_mut(r).iter_mut().zip(&self.bias) {
                *v += *b;
            }
        }
        out
    }

    pub fn zeros_like(&self) -> Self {
        DenseLayer::zeros(self.in_dim(), self.out_dim())
    }

    /// `self += a · other`; shapes must match.
    pub fn add_scaled(&mut self, other: &DenseLayer, a: f64) {
        self.weight.add_scaled(&other.weight, a);
        assert_eq!(self.bias.len(), other.bias.len(), "bias length mismatch");
        for (x, y) in self.bias.iter_mut().zip(&other.bias) {
            *x += a * *y;
        }
    }

    /// `self − other`.
    pub fn sub(&self, other: &DenseLayer) -> DenseLayer {
        assert_eq!(self.bias.len(), other.bias.len(), "bias length mismatch");
        DenseLayer {
            weight: self.weight.sub(&other.weight),
            bias: self
                .bias
                .iter()
                .zip(&other.bias)
                .map(|(a, b)| a - b)
                .collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.weight.all_finite() && self.bias.iter().all(|v| v.is_finite())
    }

    pub fn max_abs_diff(&self, other: &DenseLayer) -> f64 {
        let w = self.weight.max_abs_diff(&other.weight);
        let b = self
            .bias
            .iter()
            .zip(&other.bias)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        w.max(b)
    }
}

/// Full parameter set: extractor layers (hidden + feature) and the
/// classifier head.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub extractor: Vec<DenseLayer>,
    pub classifier: DenseLayer,
}

impl ModelParams {
    /// Draw a fresh model. Weights are drawn element-by-element in network
    /// order (extractor first, classifier last) so the layout of the random
    /// stream is stable; biases start at zero and consume no draws.
    pub fn init(config: &ModelConfig, rng: &mut ChaCha8Rng) -> ModelParams {
        assert!(
            config.input_dim > 0 && config.feature_dim > 0 && config.n_classes > 0,
            "model dimensions must be positive"
        );
        let dims = config.layer_dims();
        let n_ext = dims.len() - 1;
        let extractor = dims[..n_ext]
            .iter()
            .map(|&(i, o)| DenseLayer::init(i, o, rng))
            .collect();
        let classifier = DenseLayer::init(dims[n_ext].0, dims[n_ext].1, rng);
        ModelParams {
            extractor,
            classifier,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.extractor[0].in_dim()
    }

    pub fn feature_dim(&self) -> usize {
        self.classifier.in_dim()
    }

    pub fn n_classes(&self) -> usize {
        self.classifier.out_dim()
    }

    /// Post-activation output of every extractor layer, in order. The last
    /// entry is the (raw, unnormalized) feature matrix.
    fn forward_trace(&self, x: &Matrix) -> Result<Vec<Matrix>> {
        if x.cols() != self.input_dim() {
            return Err(Error::Shape {
                op: "forward",
                expected: format!("{} input columns", self.input_dim()),
                got: format!("{}", x.cols()),
            });
        }
        if !x.all_finite() {
            return Err(Error::NonFinite { op: "forward" });
        }
        let n_ext = self.extractor.len();
        let mut outs: Vec<Matrix> = Vec::with_capacity(n_ext);
        for (i, layer) in self.extractor.iter().enumerate() {
            let input = if i == 0 { x } else { &outs[i - 1] };
            let mut h = layer.forward(input);
            if i + 1 != n_ext {
                h = h.map(|v| if v > 0.0 { v } else { 0.0 });
            }
            outs.push(h);
        }
        Ok(outs)
    }

    /// Feature rows for a batch of inputs (identity activation, no
    /// normalization — callers that need unit vectors normalize themselves).
    pub fn forward_features(&self, x: &Matrix) -> Result<Matrix> {
        let mut outs = self.forward_trace(x)?;
        let z = outs.pop().expect("at least the feature layer");
        if !z.all_finite() {
            return Err(Error::NonFinite {
                op: "forward_features",
            });
        }
        Ok(z)
    }

    /// Classifier logits for already-extracted features. Panics on a shape
    /// mismatch like the rest of the low-level matrix ops.
    pub fn logits_from_features(&self, z: &Matrix) -> Matrix {
        self.classifier.forward(z)
    }

    pub fn forward_logits(&self, x: &Matrix) -> Result<Matrix> {
        let z = self.forward_features(x)?;
        let logits = self.logits_from_features(&z);
        if !logits.all_finite() {
            return Err(Error::NonFinite {
                op: "forward_logits",
            });
        }
        Ok(logits)
    }

    /// Gradients of a scalar objective, given its gradient at the logits and
    /// at the raw features. The two upstream terms meet at the feature
    /// matrix: objectives that only touch the logits pass zero rows for
    /// `feature_grad` and vice versa.
    pub fn backward(
        &self,
        x: &Matrix,
        logit_grad: &Matrix,
        feature_grad: &Matrix,
    ) -> Result<GradientSet> {
        let outs = self.forward_trace(x)?;
        let n = x.rows();
        if logit_grad.rows() != n || logit_grad.cols() != self.n_classes() {
            return Err(Error::Shape {
                op: "backward",
                expected: format!("{}x{} logit grad", n, self.n_classes()),
                got: format!("{}x{}", logit_grad.rows(), logit_grad.cols()),
            });
        }
        if feature_grad.rows() != n || feature_grad.cols() != self.feature_dim() {
            return Err(Error::Shape {
                op: "backward",
                expected: format!("{}x{} feature grad", n, self.feature_dim()),
                got: format!("{}x{}", feature_grad.rows(), feature_grad.cols()),
            });
        }
        let n_ext = self.extractor.len();
        let z = &outs[n_ext - 1];
        let grad_classifier = DenseLayer {
            weight: z.t_matmul(logit_grad),
            bias: logit_grad.col_sums(),
        };
        // Gradient w.r.t. the features: through the head plus the direct term.
        let mut g = logit_grad.matmul_t(&self.classifier.weight);
        g.add_assign(feature_grad);

        let mut grad_ext: Vec<DenseLayer> =
            self.extractor.iter().map(|l| l.zeros_like()).collect();
        for i in (0..n_ext).rev() {
            if i + 1 != n_ext {
                // ReLU derivative; units sitting exactly at zero pass nothing.
                for (gv, hv) in g.data_mut().iter_mut().zip(outs[i].data()) {
                    if *hv <= 0.0 {
                        *gv = 0.0;
                    }
                }
            }
            let input = if i == 0 { x } else { &outs[i - 1] };
            grad_ext[i] = DenseLayer {
                weight: input.t_matmul(&g),
                bias: g.col_sums(),
            };
            if i > 0 {
                g = g.matmul_t(&self.extractor[i].weight);
            }
        }
        Ok(GradientSet {
            extractor: grad_ext,
            classifier: grad_classifier,
        })
    }
}

/// Parameter-shaped gradients returned by [`ModelParams::backward`].
#[derive(Debug, Clone)]
pub struct GradientSet {
    pub extractor: Vec<DenseLayer>,
    pub classifier: DenseLayer,
}

impl GradientSet {
    pub fn zeros_like(params: &ModelParams) -> GradientSet {
        GradientSet {
            extractor: params.extractor.iter().map(|l| l.zeros_like()).collect(),
            classifier: params.classifier.zeros_like(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.extractor.iter().all(|l| l.all_finite()) && self.classifier.all_finite()
    }
}

/// Adam first/second moments plus the shared step counter.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub m: GradientSet,
    pub v: GradientSet,
    pub step: u64,
}

impl AdamState {
    pub fn new(params: &ModelParams) -> AdamState {
        AdamState {
            m: GradientSet::zeros_like(params),
            v: GradientSet::zeros_like(params),
            step: 0,
        }
    }
}

/// One Adam update with decoupled weight decay: the decay shrinks the
/// parameter before the moment-based delta is applied and never enters the
/// moment estimates. Rejects non-finite gradients so a diverging run fails
/// loudly instead of poisoning the parameters.
pub fn adam_step(
    params: &mut ModelParams,
    state: &mut AdamState,
    grads: &GradientSet,
    lr: f64,
    weight_decay: f64,
) -> Result<()> {
    if !grads.all_finite() {
        return Err(Error::NonFinite { op: "adam_step" });
    }
    assert_eq!(
        params.extractor.len(),
        grads.extractor.len(),
        "gradient/parameter layer count mismatch"
    );
    let AdamState { m, v, step } = state;
    *step += 1;
    let t = *step as i32;
    let bc1 = 1.0 - ADAM_BETA1.powi(t);
    let bc2 = 1.0 - ADAM_BETA2.powi(t);
    let p_iter = params
        .extractor
        .iter_mut()
        .chain(std::iter::once(&mut params.classifier));
    let g_iter = grads
        .extractor
        .iter()
        .chain(std::iter::once(&grads.classifier));
    let m_iter = m
        .extractor
        .iter_mut()
        .chain(std::iter::once(&mut m.classifier));
    let v_iter = v
        .extractor
        .iter_mut()
        .chain(std::iter::once(&mut v.classifier));
    for (((p, g), mm), vv) in p_iter.zip(g_iter).zip(m_iter).zip(v_iter) {
        adam_tensor(
            p.weight.data_mut(),
            g.weight.data(),
            mm.weight.data_mut(),
            vv.weight.data_mut(),
            lr,
            weight_decay,
            bc1,
            bc2,
        );
        adam_tensor(
            &mut p.bias,
            &g.bias,
            &mut mm.bias,
            &mut vv.bias,
            lr,
            weight_decay,
            bc1,
            bc2,
        );
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn adam_tensor(
    p: &mut [f64],
    g: &[f64],
    m: &mut [f64],
    v: &mut [f64],
    lr: f64,
    wd: f64,
    bc1: f64,
    bc2: f64,
) {
    assert!(
        p.len() == g.len() && p.len() == m.len() && p.len() == v.len(),
        "tensor length mismatch"
    );
    for i in 0..p.len() {
        p[i] -= lr * wd * p[i];
        m[i] = ADAM_BETA1 * m[i] + (1.0 - ADAM_BETA1) * g[i];
        v[i] = ADAM_BETA2 * v[i] + (1.0 - ADAM_BETA2) * g[i] * g[i];
        let m_hat = m[i] / bc1;
        let v_hat = v[i] / bc2;
        p[i] -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
    }
}

/// Step-decay schedule over a fixed horizon: the final eighth of the rounds
/// runs at 1% of the base rate, the quarter before that at 10%. `round` is
/// 1-based; the thresholds are computed in integers so there is no float
/// boundary ambiguity.
pub fn lr_at_round(base_lr: f64, round: usize, total_rounds: usize) -> f64 {
    debug_assert!(round >= 1 && total_rounds >= 1);
    if 8 * round >= 7 * total_rounds {
        base_lr * 0.01
    } else if 4 * round >= 3 * total_rounds {
        base_lr * 0.1
    } else {
        base_lr
    }
}
