//! Distance regression network with a distributional head.
//!
//! A small fully connected network maps 51 pose features (34 normalized
//! joint coordinates plus 17 visibility flags) to the parameters of a
//! predictive distribution over distance. Three heads are supported:
//! a four-parameter Johnson SU head whose asymmetry absorbs the
//! right-skewed error growth at long range, and symmetric Gaussian and
//! Laplace heads for comparison. Training minimizes the negative log
//! likelihood of the ground-truth distance; the reported distance is the
//! location parameter of the fitted distribution, and central intervals
//! are available through the quantile function.
//!
//! All forward, backward, and training paths are deterministic for a
//! given seed, independent of thread count: dropout masks are derived
//! per sample, and batch gradients reduce over fixed-size chunks in
//! index order.

use crate::dist::{
    gaussian_nll, gaussian_nll_grad, jsu_median, jsu_nll, jsu_nll_grad, jsu_quantile,
    laplace_nll, laplace_nll_grad, symmetric_quantile, JohnsonSuParams, SymmetricParams,
};
use crate::error::{Error, Result};
use crate::exec::{derive_seed, map_indexed, REDUCE_CHUNK};
use crate::nn::{relu, sigmoid, softplus, Adam, Dense, DenseGrad};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};

/// Which predictive distribution the head parameterizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossKind {
    JohnsonSu,
    Gaussian,
    Laplace,
}

impl LossKind {
    pub fn out_dim(self) -> usize {
        match self {
            LossKind::JohnsonSu => 4,
            LossKind::Gaussian | LossKind::Laplace => 2,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            LossKind::JohnsonSu => "johnson-su",
            LossKind::Gaussian => "gaussian",
            LossKind::Laplace => "laplace",
        }
    }

    /// Inverse of [`LossKind::name`].
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "johnson-su" => Ok(LossKind::JohnsonSu),
            "gaussian" => Ok(LossKind::Gaussian),
            "laplace" => Ok(LossKind::Laplace),
            other => Err(Error::InvalidParameter(format!(
                "unknown loss {other:?}; expected johnson-su, gaussian, or laplace"
            ))),
        }
    }
}

impl std::str::FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "johnson-su" | "jsu" => Ok(LossKind::JohnsonSu),
            "gaussian" => Ok(LossKind::Gaussian),
            "laplace" => Ok(LossKind::Laplace),
            other => Err(Error::InvalidParameter(format!(
                "unknown loss {other:?}; expected johnson-su, gaussian, or laplace"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocNetConfig {
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub hidden_layers: usize,
    /// Dropout probability on hidden activations during training.
    pub dropout: f64,
    pub loss: LossKind,
    /// Floor added to softplus-transformed scale parameters.
    pub epsilon: f64,
}

impl Default for LocNetConfig {
    fn default() -> Self {
        LocNetConfig {
            input_dim: 51,
            hidden_dim: 256,
            hidden_layers: 2,
            dropout: 0.2,
            loss: LossKind::JohnsonSu,
            epsilon: 1e-4,
        }
    }
}

impl LocNetConfig {
    fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.hidden_dim == 0 || self.hidden_layers == 0 {
            return Err(Error::InvalidParameter(
                "network dimensions must be positive".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::InvalidParameter(format!(
                "dropout {} outside [0, 1)",
                self.dropout
            )));
        }
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(Error::InvalidParameter("epsilon must be positive".into()));
        }
        Ok(())
    }
}

/// Parameters produced by the head for one input.
#[derive(Debug, Clone, PartialEq)]
pub enum DistanceParams {
    JohnsonSu(JohnsonSuParams),
    Gaussian(SymmetricParams),
    Laplace(SymmetricParams),
}

impl DistanceParams {
    /// Location parameter: xi for the Johnson SU head, mu for the
    /// symmetric heads. This is the distance the model reports.
    pub fn point(&self) -> f64 {
        match self {
            DistanceParams::JohnsonSu(p) => p.xi(),
            DistanceParams::Gaussian(p) | DistanceParams::Laplace(p) => p.mu(),
        }
    }

    /// Median of the predictive distribution.
    pub fn median(&self) -> f64 {
        match self {
            DistanceParams::JohnsonSu(p) => jsu_median(p),
            DistanceParams::Gaussian(p) | DistanceParams::Laplace(p) => p.mu(),
        }
    }

    pub fn quantile(&self, q: f64) -> Result<f64> {
        match self {
            DistanceParams::JohnsonSu(p) => jsu_quantile(q, p),
            DistanceParams::Gaussian(p) => symmetric_quantile(q, p, false),
            DistanceParams::Laplace(p) => symmetric_quantile(q, p, true),
        }
    }
}

/// A point estimate with a central 90% interval.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub distance: f64,
    pub lo: f64,
    pub hi: f64,
    pub params: DistanceParams,
}

/// Provenance of a trained model, stored inside the serialized container.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelMeta {
    /// Seed the training run was started with.
    pub seed: u64,
    /// Number of epochs actually run (after early stopping).
    pub epochs: usize,
    /// Validation NLL of the restored best epoch.
    pub val_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocNet {
    config: LocNetConfig,
    layers: Vec<Dense>,
    /// None until the model has been through [`train`].
    #[serde(default)]
    meta: Option<ModelMeta>,
    /// Training-time switch: while set, the gradient of the asymmetry
    /// output (gamma) is zeroed so the head keeps its initial value.
    /// Symmetric heads have no such output, so this is a no-op for them.
    /// Not persisted; inference never consults it.
    #[serde(skip)]
    gamma_frozen: bool,
    /// Training-time switch: while set, the input weights of every
    /// non-location output are excluded from updates so scale and shape
    /// parameters train as global biases. Not persisted; inference never
    /// consults it.
    #[serde(skip)]
    shape_global: bool,
}

/// Per-sample forward state kept for backpropagation.
struct Trace {
    /// Input to each dense layer.
    xs: Vec<Vec<f64>>,
    /// Pre-activation output of each hidden layer.
    pre: Vec<Vec<f64>>,
    /// Dropout scale per hidden unit (1/(1-p) kept, 0 dropped).
    drop: Vec<Vec<f64>>,
    out: Vec<f64>,
}

impl LocNet {
    pub fn new(config: LocNetConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut dims = vec![config.input_dim];
        dims.extend(std::iter::repeat(config.hidden_dim).take(config.hidden_layers));
        dims.push(config.loss.out_dim());
        let layers = dims
            .windows(2)
            .map(|w| Dense::init(w[1], w[0], &mut rng))
            .collect();
        Ok(LocNet {
            config,
            layers,
            meta: None,
            gamma_frozen: false,
            shape_global: false,
        })
    }

    /// All-zero weights; useful as a fixed point in tests.
    pub fn zeroed(config: LocNetConfig) -> Result<Self> {
        config.validate()?;
        let mut dims = vec![config.input_dim];
        dims.extend(std::iter::repeat(config.hidden_dim).take(config.hidden_layers));
        dims.push(config.loss.out_dim());
        let layers = dims.windows(2).map(|w| Dense::zeros(w[1], w[0])).collect();
        Ok(LocNet {
            config,
            layers,
            meta: None,
            gamma_frozen: false,
            shape_global: false,
        })
    }

    pub fn config(&self) -> &LocNetConfig {
        &self.config
    }

    /// Training provenance, if the model has been trained.
    pub fn meta(&self) -> Option<&ModelMeta> {
        self.meta.as_ref()
    }

    /// Sets the bias of the location output (xi or mu) so the untrained
    /// network starts near a sensible distance.
    pub fn init_location_bias(&mut self, value: f64) {
        let idx = match self.config.loss {
            LossKind::JohnsonSu => 3,
            LossKind::Gaussian | LossKind::Laplace => 0,
        };
        let head = self.layers.last_mut().expect("network has layers");
        head.b[idx] = value;
    }

    /// Controls whether the asymmetry output trains. While frozen, its
    /// gradient is zeroed and the output keeps its initialization, so
    /// the location output is forced to carry the distance signal. A
    /// short unfrozen calibration phase at the end of training then fits
    /// the asymmetry without giving it time to absorb the location.
    pub fn set_gamma_frozen(&mut self, frozen: bool) {
        self.gamma_frozen = frozen;
    }

    /// Indices of the head outputs other than the location.
    fn shape_rows(&self) -> &'static [usize] {
        match self.config.loss {
            LossKind::JohnsonSu => &[0, 1, 2],
            LossKind::Gaussian | LossKind::Laplace => &[1],
        }
    }

    /// Restricts every non-location output to a single global bias: their
    /// input weights are zeroed and excluded from further updates while
    /// the biases keep training. Per-sample shape outputs let the network
    /// trade location against scale and skew sample by sample; on
    /// symmetric data that freedom leaves the location output displaced
    /// by the random initial scatter of the shape weights. Training the
    /// shape parameters as dataset-wide constants removes it, and makes
    /// runs with different loss kinds differ only in how the location
    /// output is fit.
    pub fn set_shape_global(&mut self, global: bool) {
        self.shape_global = global;
        if global {
            let rows = self.shape_rows();
            let head = self.layers.last_mut().expect("network has layers");
            let cols = head.cols;
            for &r in rows {
                for w in head.w[r * cols..(r + 1) * cols].iter_mut() {
                    *w = 0.0;
                }
            }
        }
    }

    /// Sets the biases of the spread outputs so the untrained network
    /// starts at the given post-transform values. For the four-parameter
    /// head this sets delta and lambda; for two-parameter heads it sets
    /// the single scale to `lambda`. Starting both spread parameters
    /// near the residual scale keeps the location gradient and the shape
    /// gradients comparable in magnitude, which stops the shape outputs
    /// from absorbing all of the early training signal.
    pub fn init_spread_bias(&mut self, delta: f64, lambda: f64) {
        let eps = self.config.epsilon;
        let inv = |y: f64| {
            // softplus(x) = y  =>  x = ln(e^y - 1)
            let y = (y - eps).max(eps);
            if y > 30.0 {
                y
            } else {
                (y.exp() - 1.0).max(f64::MIN_POSITIVE).ln()
            }
        };
        let head = self.layers.last_mut().expect("network has layers");
        match self.config.loss {
            LossKind::JohnsonSu => {
                head.b[1] = inv(delta);
                head.b[2] = inv(lambda);
            }
            LossKind::Gaussian | LossKind::Laplace => {
                head.b[1] = inv(lambda);
            }
        }
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.config.input_dim {
            return Err(Error::InvalidInput(format!(
                "expected {} inputs, got {}",
                self.config.input_dim,
                x.len()
            )));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("non-finite network input".into()));
        }
        Ok(())
    }

    /// Dropout scales for one sample; the draw order (layer-major, then
    /// unit) is part of the format and must not change.
    fn dropout_masks(&self, sample_seed: u64) -> Vec<Vec<f64>> {
        let p = self.config.dropout;
        let keep_scale = 1.0 / (1.0 - p);
        let mut rng = ChaCha8Rng::seed_from_u64(sample_seed);
        (0..self.config.hidden_layers)
            .map(|_| {
                (0..self.config.hidden_dim)
                    .map(|_| {
                        if crate::exec::uniform_open01(&mut rng) < p {
                            0.0
                        } else {
                            keep_scale
                        }
                    })
                    .collect()
            })
            .collect()
    }

    fn forward_trace(&self, x: &[f64], masks: Option<&[Vec<f64>]>) -> Trace {
        let n_hidden = self.layers.len() - 1;
        let mut xs = Vec::with_capacity(self.layers.len());
        let mut pre = Vec::with_capacity(n_hidden);
        let mut drop = Vec::with_capacity(n_hidden);
        let mut cur = x.to_vec();
        for (l, layer) in self.layers[..n_hidden].iter().enumerate() {
            let mut z = Vec::new();
            layer.forward(&cur, &mut z);
            xs.push(cur);
            let mut h: Vec<f64> = z.iter().map(|&v| relu(v)).collect();
            if let Some(m) = masks {
                for (hv, &s) in h.iter_mut().zip(&m[l]) {
                    *hv *= s;
                }
                drop.push(m[l].clone());
            }
            pre.push(z);
            cur = h;
        }
        let mut out = Vec::new();
        self.layers[n_hidden].forward(&cur, &mut out);
        xs.push(cur);
        Trace {
            xs,
            pre,
            drop,
            out,
        }
    }

    /// Raw head outputs mapped to distribution parameters.
    fn head_params(&self, out: &[f64]) -> Result<DistanceParams> {
        let eps = self.config.epsilon;
        match self.config.loss {
            LossKind::JohnsonSu => {
                let p = JohnsonSuParams::new(
                    out[0],
                    softplus(out[1]) + eps,
                    softplus(out[2]) + eps,
                    out[3],
                )?;
                Ok(DistanceParams::JohnsonSu(p))
            }
            LossKind::Gaussian => Ok(DistanceParams::Gaussian(SymmetricParams::new(
                out[0],
                softplus(out[1]) + eps,
            )?)),
            LossKind::Laplace => Ok(DistanceParams::Laplace(SymmetricParams::new(
                out[0],
                softplus(out[1]) + eps,
            )?)),
        }
    }

    /// NLL of `target` and its gradient with respect to the raw head
    /// outputs (softplus reparameterization folded in).
    fn loss_at(&self, out: &[f64], target: f64) -> Result<(f64, Vec<f64>)> {
        let params = self.head_params(out)?;
        match params {
            DistanceParams::JohnsonSu(p) => {
                let nll = jsu_nll(target, &p)?;
                let [gg, gd, gl, gx] = jsu_nll_grad(target, &p)?;
                let gg = if self.gamma_frozen { 0.0 } else { gg };
                Ok((
                    nll,
                    vec![gg, gd * sigmoid(out[1]), gl * sigmoid(out[2]), gx],
                ))
            }
            DistanceParams::Gaussian(p) => {
                let nll = gaussian_nll(target, &p)?;
                let [gm, gs] = gaussian_nll_grad(target, &p)?;
                Ok((nll, vec![gm, gs * sigmoid(out[1])]))
            }
            DistanceParams::Laplace(p) => {
                let nll = laplace_nll(target, &p)?;
                let [gm, gs] = laplace_nll_grad(target, &p)?;
                Ok((nll, vec![gm, gs * sigmoid(out[1])]))
            }
        }
    }

    fn zero_grads(&self) -> Vec<DenseGrad> {
        self.layers.iter().map(DenseGrad::zeros_like).collect()
    }

    /// Backpropagates `d_out` (gradient at the raw head outputs) through
    /// the network, accumulating into `grads` and returning the gradient
    /// at the input.
    fn backward_from(&self, trace: &Trace, d_out: &[f64], grads: &mut [DenseGrad]) -> Vec<f64> {
        let n_hidden = self.layers.len() - 1;
        let mut dy = d_out.to_vec();
        let mut dx = vec![0.0; self.config.hidden_dim.max(self.config.input_dim)];
        for l in (0..self.layers.len()).rev() {
            let in_dim = self.layers[l].cols;
            dx.resize(in_dim, 0.0);
            self.layers[l].backward(&trace.xs[l], &dy, &mut grads[l], &mut dx);
            if l > 0 {
                let h = l - 1; // hidden layer feeding this one
                dy = dx[..in_dim].to_vec();
                if !trace.drop.is_empty() {
                    for (d, &s) in dy.iter_mut().zip(&trace.drop[h]) {
                        *d *= s;
                    }
                }
                for (d, &z) in dy.iter_mut().zip(&trace.pre[h]) {
                    if z <= 0.0 {
                        *d = 0.0;
                    }
                }
            }
        }
        let _ = n_hidden;
        dx
    }

    /// Mean NLL over a batch and its gradient. `dropout_seed` enables
    /// training-mode dropout; masks derive from (seed, sample index), so
    /// the result is independent of chunking and thread count.
    pub fn loss_and_grad(
        &self,
        inputs: &[&[f64]],
        targets: &[f64],
        dropout_seed: Option<u64>,
    ) -> Result<(f64, Vec<DenseGrad>)> {
        if inputs.len() != targets.len() || inputs.is_empty() {
            return Err(Error::InvalidInput(
                "batch inputs and targets must be non-empty and equal-length".into(),
            ));
        }
        let n = inputs.len();
        let n_chunks = n.div_ceil(REDUCE_CHUNK);
        let use_dropout = dropout_seed.is_some() && self.config.dropout > 0.0;
        let partials: Vec<Result<(f64, Vec<DenseGrad>)>> = map_indexed(n_chunks, |c| {
            let lo = c * REDUCE_CHUNK;
            let hi = (lo + REDUCE_CHUNK).min(n);
            let mut grads = self.zero_grads();
            let mut loss = 0.0;
            for i in lo..hi {
                self.check_input(inputs[i])?;
                let masks = if use_dropout {
                    Some(self.dropout_masks(derive_seed(
                        dropout_seed.unwrap_or(0),
                        i as u64,
                    )))
                } else {
                    None
                };
                let trace = self.forward_trace(inputs[i], masks.as_deref());
                let (l, d_out) = self.loss_at(&trace.out, targets[i])?;
                loss += l;
                self.backward_from(&trace, &d_out, &mut grads);
            }
            Ok((loss, grads))
        });
        let mut total = 0.0;
        let mut grads = self.zero_grads();
        for part in partials {
            let (l, g) = part?;
            total += l;
            for (acc, p) in grads.iter_mut().zip(&g) {
                acc.add_assign(p);
            }
        }
        let scale = 1.0 / n as f64;
        for g in grads.iter_mut() {
            g.scale(scale);
        }
        if self.shape_global {
            let rows = self.shape_rows();
            let head = grads.last_mut().expect("network has layers");
            let cols = self.layers.last().expect("network has layers").cols;
            for &r in rows {
                for w in head.w[r * cols..(r + 1) * cols].iter_mut() {
                    *w = 0.0;
                }
            }
        }
        let mean = total * scale;
        if !mean.is_finite() {
            return Err(Error::Numerical("non-finite batch loss".into()));
        }
        Ok((mean, grads))
    }

    /// Mean NLL over a batch in evaluation mode (no dropout, no
    /// gradients). This is the early-stopping metric during training.
    pub fn batch_loss(&self, inputs: &[&[f64]], targets: &[f64]) -> Result<f64> {
        if inputs.len() != targets.len() || inputs.is_empty() {
            return Err(Error::InvalidInput(
                "batch inputs and targets must be non-empty and equal-length".into(),
            ));
        }
        let n = inputs.len();
        let n_chunks = n.div_ceil(REDUCE_CHUNK);
        let partials: Vec<Result<f64>> = map_indexed(n_chunks, |c| {
            let lo = c * REDUCE_CHUNK;
            let hi = (lo + REDUCE_CHUNK).min(n);
            let mut loss = 0.0;
            for i in lo..hi {
                self.check_input(inputs[i])?;
                let trace = self.forward_trace(inputs[i], None);
                loss += self.loss_at(&trace.out, targets[i])?.0;
            }
            Ok(loss)
        });
        let mut total = 0.0;
        for part in partials {
            total += part?;
        }
        let mean = total / n as f64;
        if !mean.is_finite() {
            return Err(Error::Numerical("non-finite batch loss".into()));
        }
        Ok(mean)
    }

    /// Distribution parameters for one input (no dropout).
    pub fn forward_params(&self, x: &[f64]) -> Result<DistanceParams> {
        self.check_input(x)?;
        let trace = self.forward_trace(x, None);
        self.head_params(&trace.out)
    }

    /// Reported distance for one input: the location parameter of the
    /// fitted distribution.
    pub fn point_estimate(&self, x: &[f64]) -> Result<f64> {
        Ok(self.forward_params(x)?.point())
    }

    /// Reported distance plus the central 90% interval (quantiles 0.05
    /// and 0.95).
    pub fn predict(&self, x: &[f64]) -> Result<Prediction> {
        let params = self.forward_params(x)?;
        Ok(Prediction {
            distance: params.point(),
            lo: params.quantile(0.05)?,
            hi: params.quantile(0.95)?,
            params,
        })
    }

    /// Gradient of the reported distance with respect to the input
    /// features (evaluation mode). Useful for sensitivity analysis.
    pub fn input_jacobian(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_input(x)?;
        let trace = self.forward_trace(x, None);
        // The location parameter is a raw head output, so its cotangent
        // is a basis vector.
        let d_out = match self.config.loss {
            LossKind::JohnsonSu => vec![0.0, 0.0, 0.0, 1.0],
            LossKind::Gaussian | LossKind::Laplace => vec![1.0, 0.0],
        };
        let mut grads = self.zero_grads();
        Ok(self.backward_from(&trace, &d_out, &mut grads))
    }

    /// Serializes the model as a versioned JSON container.
    pub fn save<W: Write>(&self, writer: W) -> Result<()> {
        let container = ModelContainer {
            format: FORMAT_NAME.to_string(),
            version: FORMAT_VERSION,
            model: self.clone(),
        };
        serde_json::to_writer(writer, &container)
            .map_err(|e| Error::Schema(format!("model serialization failed: {e}")))
    }

    pub fn load<R: Read>(reader: R) -> Result<Self> {
        let container: ModelContainer = serde_json::from_reader(reader)
            .map_err(|e| Error::Schema(format!("model deserialization failed: {e}")))?;
        if container.format != FORMAT_NAME {
            return Err(Error::Schema(format!(
                "unexpected model format {:?}",
                container.format
            )));
        }
        if container.version != FORMAT_VERSION {
            return Err(Error::Version(format!(
                "unsupported model version {} (expected {FORMAT_VERSION})",
                container.version
            )));
        }
        container.model.config.validate()?;
        Ok(container.model)
    }
}

const FORMAT_NAME: &str = "pedloc-locnet";
const FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct ModelContainer {
    format: String,
    version: u32,
    model: LocNet,
}

/// Optimization settings shared by the training loops in this crate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainSpec {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Stop once this many epochs pass without a new best validation
    /// metric; 0 trains exactly one epoch.
    pub patience: usize,
    pub seed: u64,
}

impl Default for TrainSpec {
    fn default() -> Self {
        TrainSpec {
            learning_rate: 1e-3,
            batch_size: 256,
            max_epochs: 200,
            patience: 20,
            seed: 0,
        }
    }
}

/// One epoch of training history.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    /// Validation metric: mean NLL here, accuracy for classification
    /// trainers.
    pub val_metric: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub records: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_metric: f64,
}

/// Mean absolute error of the point estimate over (input, target) pairs.
pub fn mean_abs_error(model: &LocNet, pairs: &[(Vec<f64>, f64)]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::InvalidInput("empty evaluation set".into()));
    }
    let errs = map_indexed(pairs.len(), |i| {
        let (x, t) = &pairs[i];
        model.point_estimate(x).map(|p| (p - t).abs())
    });
    let mut sum = 0.0;
    for e in errs {
        sum += e?;
    }
    Ok(sum / pairs.len() as f64)
}

/// Trains `model` in place with Adam, shuffled mini-batches, and early
/// stopping on validation NLL. The weights of the best epoch are
/// restored before returning, and the model's metadata records the seed,
/// epoch count, and best validation loss. With an empty validation set
/// the train loss itself is the stopping metric.
pub fn train(
    model: &mut LocNet,
    train_pairs: &[(Vec<f64>, f64)],
    val_pairs: &[(Vec<f64>, f64)],
    spec: &TrainSpec,
) -> Result<TrainReport> {
    if train_pairs.is_empty() {
        return Err(Error::InvalidInput("empty training set".into()));
    }
    if spec.batch_size == 0 || spec.max_epochs == 0 {
        return Err(Error::InvalidParameter(
            "batch size and max epochs must be positive".into(),
        ));
    }
    let n = train_pairs.len();
    let mut adam = Adam::new(spec.learning_rate, model.layers.len() * 2);
    let mut records = Vec::new();
    let mut best_epoch = 0usize;
    let mut best_metric = f64::INFINITY;
    let mut best_layers = model.layers.clone();
    let mut step: u64 = 0;

    for epoch in 0..spec.max_epochs {
        // Even indices seed epoch shuffles, odd ones seed dropout, so the
        // two streams never collide.
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, 2 * epoch as u64));
        let order = crate::nn::shuffle_indices(n, &mut rng);

        let mut epoch_loss = 0.0;
        for batch in order.chunks(spec.batch_size) {
            let inputs: Vec<&[f64]> =
                batch.iter().map(|&i| train_pairs[i].0.as_slice()).collect();
            let targets: Vec<f64> = batch.iter().map(|&i| train_pairs[i].1).collect();
            let dropout_seed = derive_seed(spec.seed, 2 * step + 1);
            let (loss, grads) =
                model.loss_and_grad(&inputs, &targets, Some(dropout_seed))?;
            epoch_loss += loss * batch.len() as f64;
            adam.begin_step();
            for (l, g) in grads.iter().enumerate() {
                let layer = &mut model.layers[l];
                adam.update(2 * l, &mut layer.w, &g.w);
                adam.update(2 * l + 1, &mut layer.b, &g.b);
            }
            step += 1;
        }
        let train_loss = epoch_loss / n as f64;
        let val_metric = if val_pairs.is_empty() {
            train_loss
        } else {
            let inputs: Vec<&[f64]> = val_pairs.iter().map(|(x, _)| x.as_slice()).collect();
            let targets: Vec<f64> = val_pairs.iter().map(|&(_, t)| t).collect();
            model.batch_loss(&inputs, &targets)?
        };
        records.push(EpochRecord {
            epoch,
            train_loss,
            val_metric,
        });
        if val_metric < best_metric {
            best_metric = val_metric;
            best_epoch = epoch;
            best_layers = model.layers.clone();
        }
        if epoch - best_epoch >= spec.patience {
            break;
        }
    }
    model.layers = best_layers;
    model.meta = Some(ModelMeta {
        seed: spec.seed,
        epochs: records.len(),
        val_loss: best_metric,
    });
    Ok(TrainReport {
        records,
        best_epoch,
        best_val_metric: best_metric,
    })
}

/// Localizes a detected pedestrian: normalizes the keypoints against the
/// camera intrinsics and runs the network. Errors if fewer than
/// [`crate::camera::MIN_VISIBLE_JOINTS`] joints are visible.
pub fn predict_distance(
    model: &LocNet,
    keypoints: &crate::camera::Keypoints2D,
    intrinsics: &crate::camera::CameraIntrinsics,
) -> Result<Prediction> {
    let norm = crate::camera::normalize_keypoints(keypoints, intrinsics)?;
    model.predict(&norm.to_input())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dist::jsu_cdf;
    use crate::exec::uniform_open01;

    fn tiny_config(loss: LossKind, dropout: f64) -> LocNetConfig {
        LocNetConfig {
            input_dim: 5,
            hidden_dim: 8,
            hidden_layers: 2,
            dropout,
            loss,
            epsilon: 1e-4,
        }
    }

    fn random_batch(n: usize, dim: usize, seed: u64) -> (Vec<Vec<f64>>, Vec<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let xs: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..dim).map(|_| uniform_open01(&mut rng) - 0.5).collect())
            .collect();
        let ts: Vec<f64> = (0..n)
            .map(|_| 5.0 + 10.0 * uniform_open01(&mut rng))
            .collect();
        (xs, ts)
    }

    #[test]
    fn config_validation() {
        assert!(LocNet::new(tiny_config(LossKind::Gaussian, 1.0), 0).is_err());
        let mut c = tiny_config(LossKind::Gaussian, 0.0);
        c.hidden_layers = 0;
        assert!(LocNet::new(c, 0).is_err());
        assert!(LocNet::new(LocNetConfig::default(), 0).is_ok());
    }

    /// Full-network gradient check against central differences for every
    /// head.
    #[test]
    fn batch_gradients_match_finite_differences() {
        for loss in [LossKind::JohnsonSu, LossKind::Gaussian, LossKind::Laplace] {
            let mut model = LocNet::new(tiny_config(loss, 0.0), 3).unwrap();
            model.init_location_bias(10.0);
            let (xs, ts) = random_batch(4, 5, 8);
            let inputs: Vec<&[f64]> = xs.iter().map(|v| v.as_slice()).collect();
            let (_, grads) = model.loss_and_grad(&inputs, &ts, None).unwrap();
            let mut checked = 0;
            for l in 0..model.layers.len() {
                for k in (0..model.layers[l].w.len()).step_by(5) {
                    let h = 1e-6;
                    let orig = model.layers[l].w[k];
                    model.layers[l].w[k] = orig + h;
                    let (lp, _) = model.loss_and_grad(&inputs, &ts, None).unwrap();
                    model.layers[l].w[k] = orig - h;
                    let (lm, _) = model.loss_and_grad(&inputs, &ts, None).unwrap();
                    model.layers[l].w[k] = orig;
                    let fd = (lp - lm) / (2.0 * h);
                    let an = grads[l].w[k];
                    assert!(
                        (fd - an).abs() <= 1e-5 * (1.0 + fd.abs().max(an.abs())),
                        "{loss:?} layer {l} weight {k}: fd {fd} vs analytic {an}"
                    );
                    checked += 1;
                }
            }
            assert!(checked > 20);
        }
    }

    #[test]
    fn dropout_is_seeded_and_off_at_eval() {
        let model = LocNet::new(tiny_config(LossKind::JohnsonSu, 0.5), 1).unwrap();
        let (xs, ts) = random_batch(6, 5, 2);
        let inputs: Vec<&[f64]> = xs.iter().map(|v| v.as_slice()).collect();
        let (l1, g1) = model.loss_and_grad(&inputs, &ts, Some(7)).unwrap();
        let (l2, g2) = model.loss_and_grad(&inputs, &ts, Some(7)).unwrap();
        assert_eq!(l1, l2);
        assert_eq!(g1[0].w, g2[0].w);
        let (l3, _) = model.loss_and_grad(&inputs, &ts, Some(8)).unwrap();
        assert_ne!(l1, l3);
        // Eval mode ignores the dropout setting entirely.
        let (l4, _) = model.loss_and_grad(&inputs, &ts, None).unwrap();
        let eval_twice = model.loss_and_grad(&inputs, &ts, None).unwrap().0;
        assert_eq!(l4, eval_twice);
    }

    /// Chunked batch reduction must equal a plain per-sample average.
    #[test]
    fn chunked_reduction_matches_per_sample_average() {
        let model = LocNet::new(tiny_config(LossKind::JohnsonSu, 0.0), 5).unwrap();
        let (xs, ts) = random_batch(100, 5, 11);
        let inputs: Vec<&[f64]> = xs.iter().map(|v| v.as_slice()).collect();
        let (batch_loss, batch_grads) = model.loss_and_grad(&inputs, &ts, None).unwrap();
        let mut loss_sum = 0.0;
        let mut grad_sum = model.zero_grads();
        for i in 0..xs.len() {
            let (l, g) = model
                .loss_and_grad(&inputs[i..i + 1], &ts[i..i + 1], None)
                .unwrap();
            loss_sum += l;
            for (acc, gi) in grad_sum.iter_mut().zip(&g) {
                acc.add_assign(gi);
            }
        }
        let n = xs.len() as f64;
        assert!((batch_loss - loss_sum / n).abs() < 1e-12);
        for (b, s) in batch_grads.iter().zip(&grad_sum) {
            for (bv, sv) in b.w.iter().zip(&s.w) {
                assert!((bv - sv / n).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zeroed_net_predicts_its_location_bias() {
        for loss in [LossKind::JohnsonSu, LossKind::Gaussian, LossKind::Laplace] {
            let mut model = LocNet::zeroed(tiny_config(loss, 0.0)).unwrap();
            model.init_location_bias(17.5);
            let x = vec![0.3; 5];
            assert_eq!(model.point_estimate(&x).unwrap(), 17.5);
        }
    }

    #[test]
    fn prediction_reports_location_with_quantile_interval() {
        let model = LocNet::new(tiny_config(LossKind::JohnsonSu, 0.0), 9).unwrap();
        let x = vec![0.1, -0.2, 0.3, 0.0, 0.25];
        let p = model.predict(&x).unwrap();
        if let DistanceParams::JohnsonSu(params) = &p.params {
            assert_eq!(p.distance, params.xi());
            assert!((jsu_cdf(p.lo, params).unwrap() - 0.05).abs() < 1e-10);
            assert!((jsu_cdf(p.hi, params).unwrap() - 0.95).abs() < 1e-10);
        } else {
            panic!("expected a Johnson SU head");
        }
        // The median always sits inside the central interval; the location
        // parameter need not when the skew is large.
        let med = p.params.median();
        assert!(p.lo < med && med < p.hi);
    }

    /// With gamma = 0 the distribution is symmetric about xi, so the
    /// central interval must be symmetric too.
    #[test]
    fn symmetric_head_gives_symmetric_interval() {
        let mut model = LocNet::zeroed(tiny_config(LossKind::JohnsonSu, 0.0)).unwrap();
        model.init_location_bias(12.0);
        let p = model.predict(&[0.0; 5]).unwrap();
        assert_eq!(p.distance, 12.0);
        assert!(((p.hi - p.distance) - (p.distance - p.lo)).abs() < 1e-9);
    }

    /// A zeroed body with a location bias emits exactly that bias and the
    /// softplus-floor scales.
    #[test]
    fn zeroed_head_parameters_are_the_softplus_floor() {
        let mut model = LocNet::zeroed(tiny_config(LossKind::JohnsonSu, 0.0)).unwrap();
        model.init_location_bias(20.0);
        match model.forward_params(&[0.4; 5]).unwrap() {
            DistanceParams::JohnsonSu(p) => {
                assert_eq!(p.gamma(), 0.0);
                assert_eq!(p.xi(), 20.0);
                let want = 2f64.ln() + 1e-4; // softplus(0) + epsilon
                assert!((p.delta() - want).abs() < 1e-15);
                assert!((p.lambda() - want).abs() < 1e-15);
            }
            other => panic!("unexpected params {other:?}"),
        }
    }

    /// Duplicating every sample must leave the mean loss unchanged.
    #[test]
    fn batch_loss_is_mean_invariant_under_duplication() {
        let model = LocNet::new(tiny_config(LossKind::JohnsonSu, 0.0), 14).unwrap();
        let (xs, ts) = random_batch(9, 5, 3);
        let inputs: Vec<&[f64]> = xs.iter().map(|v| v.as_slice()).collect();
        let single = model.batch_loss(&inputs, &ts).unwrap();
        let doubled_inputs: Vec<&[f64]> = inputs.iter().chain(&inputs).copied().collect();
        let doubled_ts: Vec<f64> = ts.iter().chain(&ts).copied().collect();
        let doubled = model.batch_loss(&doubled_inputs, &doubled_ts).unwrap();
        assert!((single - doubled).abs() < 1e-12);
        let (grad_loss, _) = model.loss_and_grad(&inputs, &ts, None).unwrap();
        assert!((single - grad_loss).abs() < 1e-12);
    }

    /// For a symmetric (gamma = 0) head the location gradient points from
    /// the targets toward the current estimate.
    #[test]
    fn location_gradient_sign_tracks_the_residual() {
        for (bias, targets_lo) in [(30.0, 5.0), (2.0, 5.0)] {
            let mut model = LocNet::zeroed(tiny_config(LossKind::JohnsonSu, 0.0)).unwrap();
            model.init_location_bias(bias);
            let mut rng = ChaCha8Rng::seed_from_u64(4);
            let xs: Vec<Vec<f64>> = (0..40).map(|_| vec![uniform_open01(&mut rng); 5]).collect();
            let ts: Vec<f64> = (0..40)
                .map(|_| targets_lo + 10.0 * uniform_open01(&mut rng))
                .collect();
            let inputs: Vec<&[f64]> = xs.iter().map(|v| v.as_slice()).collect();
            let (_, grads) = model.loss_and_grad(&inputs, &ts, None).unwrap();
            let mean_t = ts.iter().sum::<f64>() / ts.len() as f64;
            let g_xi = grads.last().unwrap().b[3];
            assert_eq!(g_xi.signum(), (bias - mean_t).signum(), "bias {bias}");
        }
    }

    /// Initial weights follow the fan-in rule closely enough that their
    /// sample deviation stays near 1/sqrt(3 * fan_in).
    #[test]
    fn init_weight_spread_matches_fan_in_rule() {
        let cfg = tiny_config(LossKind::Gaussian, 0.0);
        let target = 1.0 / (3.0 * cfg.input_dim as f64).sqrt();
        for seed in 0..10 {
            let model = LocNet::new(cfg.clone(), seed).unwrap();
            let w = &model.layers[0].w;
            let var = w.iter().map(|v| v * v).sum::<f64>() / w.len() as f64;
            let sd = var.sqrt();
            assert!(
                sd > target / 3.0 && sd < target * 3.0,
                "seed {seed}: sd {sd} vs target {target}"
            );
        }
    }

    #[test]
    fn input_jacobian_matches_finite_differences() {
        for loss in [LossKind::JohnsonSu, LossKind::Gaussian] {
            let mut model = LocNet::new(tiny_config(loss, 0.0), 21).unwrap();
            model.init_location_bias(8.0);
            let x = vec![0.11, -0.07, 0.23, 0.31, -0.19];
            let jac = model.input_jacobian(&x).unwrap();
            assert_eq!(jac.len(), 5);
            for k in 0..x.len() {
                let h = 1e-6;
                let mut xp = x.clone();
                xp[k] += h;
                let mut xm = x.clone();
                xm[k] -= h;
                let fd = (model.point_estimate(&xp).unwrap()
                    - model.point_estimate(&xm).unwrap())
                    / (2.0 * h);
                assert!(
                    (fd - jac[k]).abs() <= 1e-6 * (1.0 + fd.abs()),
                    "{loss:?} input {k}: fd {fd} vs analytic {}",
                    jac[k]
                );
            }
        }
    }

    fn linear_pairs(n: usize, seed: u64) -> Vec<(Vec<f64>, f64)> {
        // Target is a noiseless linear function of the inputs, so even a
        // short training run must cut the error sharply.
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                let x: Vec<f64> = (0..5).map(|_| uniform_open01(&mut rng)).collect();
                let t = 6.0 + 3.0 * x[0] + 2.0 * x[1] - x[2];
                (x, t)
            })
            .collect()
    }

    #[test]
    fn training_reduces_validation_error() {
        for loss in [LossKind::JohnsonSu, LossKind::Gaussian, LossKind::Laplace] {
            let mut config = tiny_config(loss, 0.0);
            config.hidden_dim = 32;
            let mut model = LocNet::new(config, 4).unwrap();
            model.init_location_bias(7.0);
            let train_pairs = linear_pairs(600, 100);
            let val_pairs = linear_pairs(150, 101);
            let before = mean_abs_error(&model, &val_pairs).unwrap();
            let spec = TrainSpec {
                max_epochs: 30,
                batch_size: 64,
                patience: 30,
                seed: 5,
                ..TrainSpec::default()
            };
            let report = train(&mut model, &train_pairs, &val_pairs, &spec).unwrap();
            let after = mean_abs_error(&model, &val_pairs).unwrap();
            assert!(
                after < before * 0.5,
                "{loss:?}: {before} -> {after} (best {})",
                report.best_val_metric
            );
            // Restored weights reproduce the best validation NLL exactly.
            let inputs: Vec<&[f64]> = val_pairs.iter().map(|(x, _)| x.as_slice()).collect();
            let targets: Vec<f64> = val_pairs.iter().map(|&(_, t)| t).collect();
            let val_nll = model.batch_loss(&inputs, &targets).unwrap();
            assert_eq!(val_nll, report.best_val_metric);
            let meta = model.meta().expect("training sets metadata");
            assert_eq!(meta.seed, spec.seed);
            assert_eq!(meta.epochs, report.records.len());
            assert_eq!(meta.val_loss, report.best_val_metric);
        }
    }

    /// The reported best metric is the running minimum of the history and
    /// the best epoch is the first epoch attaining it.
    #[test]
    fn report_best_is_the_history_minimum() {
        let mut model = LocNet::new(tiny_config(LossKind::Gaussian, 0.1), 40).unwrap();
        model.init_location_bias(7.0);
        let train_pairs = linear_pairs(300, 17);
        let val_pairs = linear_pairs(80, 18);
        let spec = TrainSpec {
            max_epochs: 25,
            batch_size: 64,
            patience: 25,
            seed: 3,
            ..TrainSpec::default()
        };
        let report = train(&mut model, &train_pairs, &val_pairs, &spec).unwrap();
        let min = report
            .records
            .iter()
            .map(|r| r.val_metric)
            .fold(f64::INFINITY, f64::min);
        assert_eq!(report.best_val_metric, min);
        let first_argmin = report
            .records
            .iter()
            .find(|r| r.val_metric == min)
            .unwrap()
            .epoch;
        assert_eq!(report.best_epoch, first_argmin);
    }

    #[test]
    fn patience_zero_trains_exactly_one_epoch() {
        let mut model = LocNet::new(tiny_config(LossKind::Gaussian, 0.0), 1).unwrap();
        let pairs = linear_pairs(100, 3);
        let spec = TrainSpec {
            patience: 0,
            max_epochs: 50,
            batch_size: 32,
            seed: 2,
            ..TrainSpec::default()
        };
        let report = train(&mut model, &pairs, &pairs, &spec).unwrap();
        assert_eq!(report.records.len(), 1);
        assert_eq!(report.best_epoch, 0);
    }

    #[test]
    fn early_stopping_restores_best_weights() {
        let mut model = LocNet::new(tiny_config(LossKind::Gaussian, 0.1), 6).unwrap();
        model.init_location_bias(7.0);
        let train_pairs = linear_pairs(200, 7);
        let val_pairs = linear_pairs(60, 8);
        let spec = TrainSpec {
            max_epochs: 40,
            batch_size: 32,
            patience: 4,
            seed: 9,
            ..TrainSpec::default()
        };
        let report = train(&mut model, &train_pairs, &val_pairs, &spec).unwrap();
        let inputs: Vec<&[f64]> = val_pairs.iter().map(|(x, _)| x.as_slice()).collect();
        let targets: Vec<f64> = val_pairs.iter().map(|&(_, t)| t).collect();
        let final_metric = model.batch_loss(&inputs, &targets).unwrap();
        assert_eq!(final_metric, report.best_val_metric);
        let last = report.records.last().unwrap().epoch;
        assert!(last >= report.best_epoch);
        assert!(last - report.best_epoch <= spec.patience);
    }

    #[test]
    fn training_is_deterministic() {
        let pairs = linear_pairs(150, 55);
        let run = || {
            let mut model = LocNet::new(tiny_config(LossKind::JohnsonSu, 0.2), 12).unwrap();
            model.init_location_bias(7.0);
            let spec = TrainSpec {
                max_epochs: 5,
                batch_size: 32,
                patience: 5,
                seed: 77,
                ..TrainSpec::default()
            };
            train(&mut model, &pairs, &pairs[..30], &spec).unwrap();
            model
        };
        let a = run();
        let b = run();
        assert_eq!(a, b);
    }

    #[test]
    fn save_load_round_trip_and_version_checks() {
        let mut model = LocNet::new(LocNetConfig::default(), 31).unwrap();
        model.init_location_bias(15.0);
        let mut buf = Vec::new();
        model.save(&mut buf).unwrap();
        let back = LocNet::load(buf.as_slice()).unwrap();
        assert_eq!(model, back);

        let text = String::from_utf8(buf).unwrap();
        let wrong_version = text.replace("\"version\":1", "\"version\":99");
        match LocNet::load(wrong_version.as_bytes()).unwrap_err() {
            Error::Version(_) => {}
            other => panic!("unexpected error {other:?}"),
        }
        let wrong_format = text.replace("pedloc-locnet", "pedloc-other");
        match LocNet::load(wrong_format.as_bytes()).unwrap_err() {
            Error::Schema(_) => {}
            other => panic!("unexpected error {other:?}"),
        }
    }

    /// Serialization must not perturb any prediction, bit for bit.
    #[test]
    fn loaded_model_predicts_bit_identically() {
        let mut model = LocNet::new(tiny_config(LossKind::JohnsonSu, 0.0), 23).unwrap();
        model.init_location_bias(11.0);
        let mut buf = Vec::new();
        model.save(&mut buf).unwrap();
        let back = LocNet::load(buf.as_slice()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for _ in 0..100 {
            let x: Vec<f64> = (0..5).map(|_| 2.0 * uniform_open01(&mut rng) - 1.0).collect();
            let a = model.predict(&x).unwrap();
            let b = back.predict(&x).unwrap();
            assert_eq!(a.distance.to_bits(), b.distance.to_bits());
            assert_eq!(a.lo.to_bits(), b.lo.to_bits());
            assert_eq!(a.hi.to_bits(), b.hi.to_bits());
        }
    }

    #[test]
    fn predict_distance_requires_enough_visible_joints() {
        use crate::camera::{CameraIntrinsics, Joint2D, Keypoints2D};
        let intr = CameraIntrinsics::new(1000.0, 1000.0, 960.0, 540.0).unwrap();
        let model = LocNet::new(LocNetConfig::default(), 2).unwrap();
        let mut joints = [Joint2D {
            u: 960.0,
            v: 540.0,
            visible: false,
        }; 17];
        for j in joints.iter_mut().take(3) {
            j.visible = true;
        }
        let kp = Keypoints2D::new(joints, Some([940.0, 400.0, 980.0, 700.0])).unwrap();
        assert!(predict_distance(&model, &kp, &intr).is_err());
        for j in joints.iter_mut() {
            j.visible = true;
        }
        let kp = Keypoints2D::new(joints, Some([940.0, 400.0, 980.0, 700.0])).unwrap();
        let p = predict_distance(&model, &kp, &intr).unwrap();
        assert!(p.distance.is_finite());
    }

    #[test]
    fn rejects_bad_inputs() {
        let model = LocNet::new(tiny_config(LossKind::Gaussian, 0.0), 1).unwrap();
        assert!(model.point_estimate(&[0.0; 4]).is_err());
        assert!(model.point_estimate(&[f64::NAN, 0.0, 0.0, 0.0, 0.0]).is_err());
        let x = [0.0; 5];
        assert!(model
            .loss_and_grad(&[&x], &[f64::NAN], None)
            .is_err());
    }
}
