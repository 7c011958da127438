//! Multi-scale temporal relation network over per-frame feature vectors.
//!
//! A sequence of N frame features is scored by summing learned relation
//! functions over ordered frame tuples: for each scale d, a two-layer
//! network g consumes the concatenation of d frames (in temporal order)
//! and a linear readout h maps the pooled relation to class logits. The
//! multi-scale score is the exact element-wise sum of the per-scale
//! logits for d = 2 up to the configured maximum. Classification applies
//! a softmax with lowest-index tie-breaking.
//!
//! Tuples per scale are fixed at model construction: complete when the
//! binomial count fits the per-scale budget, otherwise a seeded distinct
//! sample. They are stored sorted and summed in that order, so results
//! never depend on enumeration or thread order.
//!
//! This module never touches images: features arrive from files (or the
//! synthetic motif generator), with an optional two-stream fusion that
//! concatenates per-frame features before the network.

use crate::error::{Error, Result};
use crate::exec::{derive_seed, map_indexed, uniform_open01, REDUCE_CHUNK};
use crate::locnet::{EpochRecord, TrainReport, TrainSpec};
use crate::nn::{relu, Adam, Dense, DenseGrad};
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::io::{BufRead, Read, Write};

/// Ordered per-frame feature vectors, optionally labeled.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSequence {
    frames: Vec<Vec<f64>>,
    pub label: Option<usize>,
}

impl FeatureSequence {
    pub fn new(frames: Vec<Vec<f64>>, label: Option<usize>) -> Result<Self> {
        if frames.len() < 2 {
            return Err(Error::InvalidInput(
                "a feature sequence needs at least two frames".into(),
            ));
        }
        let dim = frames[0].len();
        if dim == 0 || frames.iter().any(|f| f.len() != dim) {
            return Err(Error::InvalidInput(
                "all frames must share one positive dimension".into(),
            ));
        }
        if frames.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("non-finite feature value".into()));
        }
        Ok(FeatureSequence { frames, label })
    }

    pub fn frames(&self) -> &[Vec<f64>] {
        &self.frames
    }

    pub fn num_frames(&self) -> usize {
        self.frames.len()
    }

    pub fn dim(&self) -> usize {
        self.frames[0].len()
    }
}

/// Concatenates two aligned streams frame by frame; the output dimension
/// is the sum of the input dimensions.
pub fn fuse_streams(a: &FeatureSequence, b: &FeatureSequence) -> Result<FeatureSequence> {
    if a.num_frames() != b.num_frames() {
        return Err(Error::InvalidInput(format!(
            "stream lengths differ: {} vs {}",
            a.num_frames(),
            b.num_frames()
        )));
    }
    let label = match (a.label, b.label) {
        (Some(x), Some(y)) if x != y => {
            return Err(Error::InvalidInput(format!(
                "stream labels disagree: {x} vs {y}"
            )))
        }
        (x, y) => x.or(y),
    };
    let frames = a
        .frames
        .iter()
        .zip(&b.frames)
        .map(|(fa, fb)| fa.iter().chain(fb.iter()).copied().collect())
        .collect();
    FeatureSequence::new(frames, label)
}

/// How the model's input features were assembled.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Fusion {
    Single,
    ConcatTwoStream,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrnConfig {
    /// Largest tuple size; scales 2..=max_scale are all active.
    pub max_scale: usize,
    /// Per-scale tuple budget k: complete enumeration when C(N, d) <= k.
    pub tuples_per_scale: usize,
    pub g_hidden: usize,
    pub num_classes: usize,
    pub fusion: Fusion,
    /// Seeds both weight initialization and tuple sampling.
    pub seed: u64,
}

impl Default for TrnConfig {
    fn default() -> Self {
        TrnConfig {
            max_scale: 8,
            tuples_per_scale: 8,
            g_hidden: 256,
            num_classes: 8,
            fusion: Fusion::Single,
            seed: 0,
        }
    }
}

impl TrnConfig {
    fn validate(&self) -> Result<()> {
        if self.max_scale < 2 {
            return Err(Error::InvalidParameter("max_scale must be at least 2".into()));
        }
        if self.tuples_per_scale == 0 || self.g_hidden == 0 {
            return Err(Error::InvalidParameter(
                "tuple budget and hidden width must be positive".into(),
            ));
        }
        if self.num_classes < 2 {
            return Err(Error::InvalidParameter(
                "at least two classes required".into(),
            ));
        }
        Ok(())
    }
}

/// C(n, k) without overflow for the frame counts used here.
pub fn binomial(n: usize, k: usize) -> u128 {
    if k > n {
        return 0;
    }
    let k = k.min(n - k);
    let mut acc: u128 = 1;
    for i in 0..k {
        acc = acc * (n - i) as u128 / (i + 1) as u128;
    }
    acc
}

/// Lexicographic unranking of the `rank`-th strictly increasing d-tuple
/// over 0..n.
fn unrank_tuple(mut rank: u128, n: usize, d: usize) -> Vec<usize> {
    let mut tuple = Vec::with_capacity(d);
    let mut x = 0usize;
    for i in 0..d {
        loop {
            let c = binomial(n - 1 - x, d - 1 - i);
            if rank < c {
                tuple.push(x);
                x += 1;
                break;
            }
            rank -= c;
            x += 1;
        }
    }
    tuple
}

fn uniform_below<R: RngCore>(rng: &mut R, bound: u64) -> u64 {
    // Rejection sampling to kill modulo bias.
    let zone = u64::MAX - u64::MAX % bound;
    loop {
        let v = rng.next_u64();
        if v < zone {
            return v % bound;
        }
    }
}

/// Strictly increasing d-tuples over 0..n, sorted lexicographically.
/// Returns every tuple when C(n, d) <= k, otherwise k distinct seeded
/// samples; either way the result is fully determined by the arguments.
pub fn enumerate_tuples(n: usize, d: usize, k: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    if d < 2 || d > n {
        return Err(Error::InvalidParameter(format!(
            "scale {d} out of range for {n} frames"
        )));
    }
    if k == 0 {
        return Err(Error::InvalidParameter("tuple budget must be positive".into()));
    }
    let total = binomial(n, d);
    if total <= k as u128 {
        return Ok((0..total).map(|r| unrank_tuple(r, n, d)).collect());
    }
    debug_assert!(total <= u64::MAX as u128, "frame counts stay small");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ranks = std::collections::BTreeSet::new();
    while ranks.len() < k {
        ranks.insert(uniform_below(&mut rng, total as u64));
    }
    // BTreeSet iterates ranks in order, which is lexicographic tuple order.
    Ok(ranks
        .into_iter()
        .map(|r| unrank_tuple(r as u128, n, d))
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrnModel {
    config: TrnConfig,
    num_frames: usize,
    feature_dim: usize,
    /// tuples[s] lists the sorted frame tuples for scale s + 2.
    tuples: Vec<Vec<Vec<usize>>>,
    g1: Vec<Dense>,
    g2: Vec<Dense>,
    h: Vec<Dense>,
}

/// Gradients aligned with a model's per-scale layers.
pub struct TrnGrads {
    pub g1: Vec<DenseGrad>,
    pub g2: Vec<DenseGrad>,
    pub h: Vec<DenseGrad>,
}

impl TrnGrads {
    fn zeros_like(model: &TrnModel) -> Self {
        TrnGrads {
            g1: model.g1.iter().map(DenseGrad::zeros_like).collect(),
            g2: model.g2.iter().map(DenseGrad::zeros_like).collect(),
            h: model.h.iter().map(DenseGrad::zeros_like).collect(),
        }
    }

    fn add_assign(&mut self, other: &TrnGrads) {
        for (a, b) in self.g1.iter_mut().zip(&other.g1) {
            a.add_assign(b);
        }
        for (a, b) in self.g2.iter_mut().zip(&other.g2) {
            a.add_assign(b);
        }
        for (a, b) in self.h.iter_mut().zip(&other.h) {
            a.add_assign(b);
        }
    }

    fn scale(&mut self, s: f64) {
        for g in self.g1.iter_mut().chain(&mut self.g2).chain(&mut self.h) {
            g.scale(s);
        }
    }
}

impl TrnModel {
    pub fn new(config: TrnConfig, num_frames: usize, feature_dim: usize) -> Result<Self> {
        Self::build(config, num_frames, feature_dim, false)
    }

    /// All-zero weights, same tuple structure; a fixed point for tests.
    pub fn zeroed(config: TrnConfig, num_frames: usize, feature_dim: usize) -> Result<Self> {
        Self::build(config, num_frames, feature_dim, true)
    }

    fn build(
        config: TrnConfig,
        num_frames: usize,
        feature_dim: usize,
        zeroed: bool,
    ) -> Result<Self> {
        config.validate()?;
        if num_frames < 2 || feature_dim == 0 {
            return Err(Error::InvalidParameter(
                "need at least two frames and a positive feature dimension".into(),
            ));
        }
        if config.max_scale > num_frames {
            return Err(Error::InvalidParameter(format!(
                "max_scale {} exceeds frame count {num_frames}",
                config.max_scale
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut tuples = Vec::new();
        let mut g1 = Vec::new();
        let mut g2 = Vec::new();
        let mut h = Vec::new();
        for d in 2..=config.max_scale {
            // Tuple sampling gets its own derived stream per scale so the
            // weight stream stays contiguous.
            tuples.push(enumerate_tuples(
                num_frames,
                d,
                config.tuples_per_scale,
                derive_seed(config.seed, 0x5455_0000 + d as u64),
            )?);
            let (a, b, c) = if zeroed {
                (
                    Dense::zeros(config.g_hidden, d * feature_dim),
                    Dense::zeros(config.g_hidden, config.g_hidden),
                    Dense::zeros(config.num_classes, config.g_hidden),
                )
            } else {
                (
                    Dense::init(config.g_hidden, d * feature_dim, &mut rng),
                    Dense::init(config.g_hidden, config.g_hidden, &mut rng),
                    Dense::init(config.num_classes, config.g_hidden, &mut rng),
                )
            };
            g1.push(a);
            g2.push(b);
            h.push(c);
        }
        Ok(TrnModel {
            config,
            num_frames,
            feature_dim,
            tuples,
            g1,
            g2,
            h,
        })
    }

    pub fn config(&self) -> &TrnConfig {
        &self.config
    }

    pub fn num_frames(&self) -> usize {
        self.num_frames
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    /// Sorted frame tuples used at scale `d`.
    pub fn tuples(&self, d: usize) -> Result<&[Vec<usize>]> {
        Ok(&self.tuples[self.scale_index(d)?])
    }

    fn scale_index(&self, d: usize) -> Result<usize> {
        if d < 2 || d > self.config.max_scale {
            return Err(Error::InvalidParameter(format!(
                "scale {d} not in this model (2..={})",
                self.config.max_scale
            )));
        }
        Ok(d - 2)
    }

    fn check_seq(&self, seq: &FeatureSequence) -> Result<()> {
        if seq.num_frames() != self.num_frames {
            return Err(Error::InvalidInput(format!(
                "sequence has {} frames, model expects {}",
                seq.num_frames(),
                self.num_frames
            )));
        }
        if seq.dim() != self.feature_dim {
            return Err(Error::InvalidInput(format!(
                "feature dimension {} does not match model dimension {}",
                seq.dim(),
                self.feature_dim
            )));
        }
        Ok(())
    }

    fn concat_frames(&self, seq: &FeatureSequence, tuple: &[usize], out: &mut Vec<f64>) {
        out.clear();
        for &f in tuple {
            out.extend_from_slice(&seq.frames[f]);
        }
    }

    /// Per-scale class logits: the fixed-order sum over this scale's
    /// tuples of h(g(concatenated frames)).
    pub fn relation_scale(&self, seq: &FeatureSequence, d: usize) -> Result<Vec<f64>> {
        self.check_seq(seq)?;
        let s = self.scale_index(d)?;
        let mut logits = vec![0.0; self.config.num_classes];
        let (mut x, mut z1, mut z2, mut out) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
        for tuple in &self.tuples[s] {
            self.concat_frames(seq, tuple, &mut x);
            self.g1[s].forward(&x, &mut z1);
            for v in z1.iter_mut() {
                *v = relu(*v);
            }
            self.g2[s].forward(&z1, &mut z2);
            for v in z2.iter_mut() {
                *v = relu(*v);
            }
            self.h[s].forward(&z2, &mut out);
            for (l, o) in logits.iter_mut().zip(&out) {
                *l += o;
            }
        }
        Ok(logits)
    }

    /// Multi-scale logits: the element-wise sum of `relation_scale` over
    /// every scale, in ascending scale order.
    pub fn multiscale(&self, seq: &FeatureSequence) -> Result<Vec<f64>> {
        let mut logits = vec![0.0; self.config.num_classes];
        for d in 2..=self.config.max_scale {
            let t = self.relation_scale(seq, d)?;
            for (l, v) in logits.iter_mut().zip(&t) {
                *l += v;
            }
        }
        Ok(logits)
    }

    /// Softmax class probabilities and the argmax label (lowest index on
    /// ties).
    pub fn classify(&self, seq: &FeatureSequence) -> Result<(usize, Vec<f64>)> {
        let logits = self.multiscale(seq)?;
        let probs = softmax(&logits);
        let mut best = 0;
        for (i, p) in probs.iter().enumerate() {
            if *p > probs[best] {
                best = i;
            }
        }
        Ok((best, probs))
    }

    /// Mean cross-entropy over labeled sequences and its gradient.
    /// Chunked fixed-order reduction keeps the result independent of
    /// thread count.
    pub fn loss_and_grad(&self, seqs: &[&FeatureSequence]) -> Result<(f64, TrnGrads)> {
        if seqs.is_empty() {
            return Err(Error::InvalidInput("empty batch".into()));
        }
        let n = seqs.len();
        let n_chunks = n.div_ceil(REDUCE_CHUNK);
        let partials: Vec<Result<(f64, TrnGrads)>> = map_indexed(n_chunks, |c| {
            let lo = c * REDUCE_CHUNK;
            let hi = (lo + REDUCE_CHUNK).min(n);
            let mut grads = TrnGrads::zeros_like(self);
            let mut loss = 0.0;
            for seq in &seqs[lo..hi] {
                loss += self.backprop_one(seq, &mut grads)?;
            }
            Ok((loss, grads))
        });
        let mut total = 0.0;
        let mut grads = TrnGrads::zeros_like(self);
        for part in partials {
            let (l, g) = part?;
            total += l;
            grads.add_assign(&g);
        }
        let scale = 1.0 / n as f64;
        grads.scale(scale);
        let mean = total * scale;
        if !mean.is_finite() {
            return Err(Error::Numerical("non-finite batch loss".into()));
        }
        Ok((mean, grads))
    }

    fn backprop_one(&self, seq: &FeatureSequence, grads: &mut TrnGrads) -> Result<f64> {
        self.check_seq(seq)?;
        let label = seq.label.ok_or_else(|| {
            Error::InvalidInput("training sequences must carry labels".into())
        })?;
        if label >= self.config.num_classes {
            return Err(Error::InvalidInput(format!(
                "label {label} out of range for {} classes",
                self.config.num_classes
            )));
        }
        // Forward pass, keeping per-tuple activations for the backward
        // sweep.
        let n_scales = self.tuples.len();
        let mut traces: Vec<Vec<(Vec<f64>, Vec<f64>, Vec<f64>)>> = Vec::with_capacity(n_scales);
        let mut logits = vec![0.0; self.config.num_classes];
        for s in 0..n_scales {
            let mut per_tuple = Vec::with_capacity(self.tuples[s].len());
            for tuple in &self.tuples[s] {
                let mut x = Vec::new();
                self.concat_frames(seq, tuple, &mut x);
                let mut z1 = Vec::new();
                self.g1[s].forward(&x, &mut z1);
                let a1: Vec<f64> = z1.iter().map(|&v| relu(v)).collect();
                let mut z2 = Vec::new();
                self.g2[s].forward(&a1, &mut z2);
                let a2: Vec<f64> = z2.iter().map(|&v| relu(v)).collect();
                let mut out = Vec::new();
                self.h[s].forward(&a2, &mut out);
                for (l, o) in logits.iter_mut().zip(&out) {
                    *l += o;
                }
                per_tuple.push((x, a1, a2));
            }
            traces.push(per_tuple);
        }
        let probs = softmax(&logits);
        let loss = -probs[label].max(f64::MIN_POSITIVE).ln();
        let mut d_logits = probs;
        d_logits[label] -= 1.0;

        let mut d_a2 = Vec::new();
        let mut d_a1 = Vec::new();
        let mut d_x = Vec::new();
        for s in 0..n_scales {
            for (x, a1, a2) in &traces[s] {
                d_a2.resize(self.config.g_hidden, 0.0);
                self.h[s].backward(a2, &d_logits, &mut grads.h[s], &mut d_a2);
                for (d, &a) in d_a2.iter_mut().zip(a2) {
                    if a <= 0.0 {
                        *d = 0.0;
                    }
                }
                d_a1.resize(self.config.g_hidden, 0.0);
                self.g2[s].backward(a1, &d_a2, &mut grads.g2[s], &mut d_a1);
                for (d, &a) in d_a1.iter_mut().zip(a1) {
                    if a <= 0.0 {
                        *d = 0.0;
                    }
                }
                d_x.resize(x.len(), 0.0);
                self.g1[s].backward(x, &d_a1, &mut grads.g1[s], &mut d_x);
            }
        }
        Ok(loss)
    }

    /// Serializes the model as a versioned JSON container.
    pub fn save<W: Write>(&self, writer: W) -> Result<()> {
        let container = TrnContainer {
            format: TRN_FORMAT.to_string(),
            version: TRN_VERSION,
            model: self.clone(),
        };
        serde_json::to_writer(writer, &container)
            .map_err(|e| Error::Schema(format!("model serialization failed: {e}")))
    }

    pub fn load<R: Read>(reader: R) -> Result<Self> {
        let container: TrnContainer = serde_json::from_reader(reader)
            .map_err(|e| Error::Schema(format!("model deserialization failed: {e}")))?;
        if container.format != TRN_FORMAT {
            return Err(Error::Schema(format!(
                "unexpected model format {:?}",
                container.format
            )));
        }
        if container.version != TRN_VERSION {
            return Err(Error::Version(format!(
                "unsupported model version {} (expected {TRN_VERSION})",
                container.version
            )));
        }
        container.model.config.validate()?;
        Ok(container.model)
    }
}

const TRN_FORMAT: &str = "pedloc-trn";
const TRN_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct TrnContainer {
    format: String,
    version: u32,
    model: TrnModel,
}

/// Numerically stable softmax.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&l| (l - m).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Fraction of sequences whose argmax class matches their label.
pub fn accuracy(model: &TrnModel, seqs: &[FeatureSequence]) -> Result<f64> {
    if seqs.is_empty() {
        return Err(Error::InvalidInput("empty evaluation set".into()));
    }
    let hits = map_indexed(seqs.len(), |i| -> Result<u64> {
        let label = seqs[i].label.ok_or_else(|| {
            Error::InvalidInput("evaluation sequences must carry labels".into())
        })?;
        Ok((model.classify(&seqs[i])?.0 == label) as u64)
    });
    let mut correct = 0u64;
    for h in hits {
        correct += h?;
    }
    Ok(correct as f64 / seqs.len() as f64)
}

/// Trains the model with Adam on shuffled mini-batches of cross-entropy,
/// early-stopping on validation accuracy (higher is better); the best
/// epoch's weights are restored before returning. With an empty
/// validation set the negated train loss serves as the metric.
pub fn trn_train(
    model: &mut TrnModel,
    train_seqs: &[FeatureSequence],
    val_seqs: &[FeatureSequence],
    spec: &TrainSpec,
) -> Result<TrainReport> {
    if train_seqs.is_empty() {
        return Err(Error::InvalidInput("empty training set".into()));
    }
    if spec.batch_size == 0 || spec.max_epochs == 0 {
        return Err(Error::InvalidParameter(
            "batch size and max epochs must be positive".into(),
        ));
    }
    let n = train_seqs.len();
    let n_scales = model.g1.len();
    let mut adam = Adam::new(spec.learning_rate, n_scales * 6);
    let mut records = Vec::new();
    let mut best_epoch = 0usize;
    let mut best_metric = f64::NEG_INFINITY;
    let mut best = (model.g1.clone(), model.g2.clone(), model.h.clone());

    for epoch in 0..spec.max_epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, 2 * epoch as u64));
        let order = crate::nn::shuffle_indices(n, &mut rng);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(spec.batch_size) {
            let seqs: Vec<&FeatureSequence> = batch.iter().map(|&i| &train_seqs[i]).collect();
            let (loss, grads) = model.loss_and_grad(&seqs)?;
            epoch_loss += loss * batch.len() as f64;
            adam.begin_step();
            for s in 0..n_scales {
                adam.update(6 * s, &mut model.g1[s].w, &grads.g1[s].w);
                adam.update(6 * s + 1, &mut model.g1[s].b, &grads.g1[s].b);
                adam.update(6 * s + 2, &mut model.g2[s].w, &grads.g2[s].w);
                adam.update(6 * s + 3, &mut model.g2[s].b, &grads.g2[s].b);
                adam.update(6 * s + 4, &mut model.h[s].w, &grads.h[s].w);
                adam.update(6 * s + 5, &mut model.h[s].b, &grads.h[s].b);
            }
        }
        let train_loss = epoch_loss / n as f64;
        let val_metric = if val_seqs.is_empty() {
            -train_loss
        } else {
            accuracy(model, val_seqs)?
        };
        records.push(EpochRecord {
            epoch,
            train_loss,
            val_metric,
        });
        if val_metric > best_metric {
            best_metric = val_metric;
            best_epoch = epoch;
            best = (model.g1.clone(), model.g2.clone(), model.h.clone());
        }
        if epoch - best_epoch >= spec.patience {
            break;
        }
    }
    model.g1 = best.0;
    model.g2 = best.1;
    model.h = best.2;
    Ok(TrainReport {
        records,
        best_epoch,
        best_val_metric: best_metric,
    })
}

/// Synthetic sequence-classification tasks with known structure.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MotifTask {
    /// A fixed motif vector is added to exactly one frame; the class is
    /// that frame's index (num_classes = num_frames).
    Position,
    /// Two token vectors A and B occupy the four central frames as
    /// A B B A (class 0) or B A A B (class 1). The two classes have
    /// identical multisets of ordered frame-content pairs, so pairwise
    /// relations carry almost no signal and scale >= 3 is required.
    LongRangeOrder,
}

impl MotifTask {
    pub fn num_classes(self, num_frames: usize) -> usize {
        match self {
            MotifTask::Position => num_frames,
            MotifTask::LongRangeOrder => 2,
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "position" => Ok(MotifTask::Position),
            "long-range-order" => Ok(MotifTask::LongRangeOrder),
            other => Err(Error::InvalidParameter(format!(
                "unknown motif task {other:?}; expected position or long-range-order"
            ))),
        }
    }
}

fn sign_vector<R: RngCore>(dim: usize, rng: &mut R) -> Vec<f64> {
    (0..dim)
        .map(|_| if uniform_open01(rng) < 0.5 { -1.0 } else { 1.0 })
        .collect()
}

/// Generates `count` labeled sequences (labels cycle through the
/// classes). Background is white Gaussian noise. The token vectors that
/// define the classes depend only on the task and dimension, never on
/// `seed`, so datasets drawn with different seeds are train/validation
/// splits of the same task.
pub fn synth_motif(
    task: MotifTask,
    count: usize,
    num_frames: usize,
    dim: usize,
    noise_sigma: f64,
    seed: u64,
) -> Result<Vec<FeatureSequence>> {
    if num_frames < 4 || dim == 0 {
        return Err(Error::InvalidParameter(
            "motif tasks need at least four frames and a positive dimension".into(),
        ));
    }
    if noise_sigma < 0.0 {
        return Err(Error::InvalidParameter("noise sigma must be non-negative".into()));
    }
    let classes = task.num_classes(num_frames);
    // Token vectors come from a fixed stream so every seed sees the same
    // classes.
    let mut token_rng = ChaCha8Rng::seed_from_u64(0x6d6f746966);
    let token_a = sign_vector(dim, &mut token_rng);
    let token_b = sign_vector(dim, &mut token_rng);

    let sequences = map_indexed(count, |i| {
        let label = i % classes;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, i as u64));
        let mut frames: Vec<Vec<f64>> = (0..num_frames)
            .map(|_| {
                (0..dim)
                    .map(|_| noise_sigma * normal_draw(&mut rng))
                    .collect()
            })
            .collect();
        match task {
            MotifTask::Position => {
                for (v, m) in frames[label].iter_mut().zip(&token_a) {
                    *v += m;
                }
            }
            MotifTask::LongRangeOrder => {
                let start = (num_frames - 4) / 2;
                let pattern: [&[f64]; 4] = if label == 0 {
                    [&token_a, &token_b, &token_b, &token_a]
                } else {
                    [&token_b, &token_a, &token_a, &token_b]
                };
                for (offset, token) in pattern.iter().enumerate() {
                    for (v, m) in frames[start + offset].iter_mut().zip(*token) {
                        *v += *m;
                    }
                }
            }
        }
        FeatureSequence::new(frames, Some(label))
    });
    sequences.into_iter().collect()
}

fn normal_draw<R: RngCore>(rng: &mut R) -> f64 {
    crate::dist::normal::quantile(uniform_open01(rng))
}

/// A uniform collection of feature sequences plus its file-level header
/// fields. `stream_dim` is the per-stream dimension; each frame holds
/// `num_streams * stream_dim` values, stream-major.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureDataset {
    pub num_frames: usize,
    pub stream_dim: usize,
    pub num_streams: usize,
    pub sequences: Vec<FeatureSequence>,
}

impl FeatureDataset {
    pub fn new(sequences: Vec<FeatureSequence>, num_streams: usize) -> Result<Self> {
        if sequences.is_empty() {
            return Err(Error::InvalidInput("empty feature dataset".into()));
        }
        if num_streams == 0 {
            return Err(Error::InvalidParameter("need at least one stream".into()));
        }
        let num_frames = sequences[0].num_frames();
        let dim = sequences[0].dim();
        if dim % num_streams != 0 {
            return Err(Error::InvalidInput(format!(
                "dimension {dim} not divisible by {num_streams} streams"
            )));
        }
        let labeled = sequences[0].label.is_some();
        for (i, s) in sequences.iter().enumerate() {
            if s.num_frames() != num_frames || s.dim() != dim {
                return Err(Error::InvalidInput(format!(
                    "sequence {i} has mismatched shape"
                )));
            }
            if s.label.is_some() != labeled {
                return Err(Error::InvalidInput(
                    "either all sequences carry labels or none do".into(),
                ));
            }
        }
        Ok(FeatureDataset {
            num_frames,
            stream_dim: dim / num_streams,
            num_streams,
            sequences,
        })
    }

    pub fn feature_dim(&self) -> usize {
        self.stream_dim * self.num_streams
    }

    pub fn labeled(&self) -> bool {
        self.sequences[0].label.is_some()
    }
}

const FEATURE_MAGIC: &[u8; 4] = b"PTRN";
const FEATURE_VERSION: u32 = 1;

fn write_u32<W: Write>(w: &mut W, v: u32) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

/// Binary feature file: magic `PTRN`, then little-endian u32 version,
/// frame count, per-stream dimension, stream count, sequence count, and
/// a labels flag byte; each sequence follows as an optional u32 label
/// and its frame-major little-endian f64 payload.
pub fn write_features_binary<W: Write>(ds: &FeatureDataset, mut w: W) -> Result<()> {
    let as_u32 = |v: usize, what: &str| -> Result<u32> {
        u32::try_from(v).map_err(|_| Error::InvalidInput(format!("{what} too large")))
    };
    w.write_all(FEATURE_MAGIC)?;
    write_u32(&mut w, FEATURE_VERSION)?;
    write_u32(&mut w, as_u32(ds.num_frames, "frame count")?)?;
    write_u32(&mut w, as_u32(ds.stream_dim, "dimension")?)?;
    write_u32(&mut w, as_u32(ds.num_streams, "stream count")?)?;
    write_u32(&mut w, as_u32(ds.sequences.len(), "sequence count")?)?;
    w.write_all(&[ds.labeled() as u8])?;
    for s in &ds.sequences {
        if let Some(label) = s.label {
            write_u32(&mut w, as_u32(label, "label")?)?;
        }
        for frame in s.frames() {
            for v in frame {
                w.write_all(&v.to_le_bytes())?;
            }
        }
    }
    Ok(())
}

pub fn read_features_binary<R: Read>(mut r: R) -> Result<FeatureDataset> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != FEATURE_MAGIC {
        return Err(Error::Schema("not a feature file (bad magic)".into()));
    }
    let version = read_u32(&mut r)?;
    if version != FEATURE_VERSION {
        return Err(Error::Version(format!(
            "unsupported feature file version {version} (expected {FEATURE_VERSION})"
        )));
    }
    let num_frames = read_u32(&mut r)? as usize;
    let stream_dim = read_u32(&mut r)? as usize;
    let num_streams = read_u32(&mut r)? as usize;
    let count = read_u32(&mut r)? as usize;
    let mut flag = [0u8; 1];
    r.read_exact(&mut flag)?;
    if flag[0] > 1 {
        return Err(Error::Schema(format!("invalid labels flag {}", flag[0])));
    }
    let has_labels = flag[0] == 1;
    let dim = stream_dim * num_streams;
    let mut sequences = Vec::with_capacity(count);
    let mut buf = [0u8; 8];
    for _ in 0..count {
        let label = if has_labels {
            Some(read_u32(&mut r)? as usize)
        } else {
            None
        };
        let mut frames = Vec::with_capacity(num_frames);
        for _ in 0..num_frames {
            let mut frame = Vec::with_capacity(dim);
            for _ in 0..dim {
                r.read_exact(&mut buf)?;
                frame.push(f64::from_le_bytes(buf));
            }
            frames.push(frame);
        }
        sequences.push(FeatureSequence::new(frames, label)?);
    }
    FeatureDataset::new(sequences, num_streams.max(1))
}

/// Text feature file: a header line
/// `ptrn-text <version> <frames> <stream_dim> <streams> <labels 0|1>`,
/// then one line per sequence (optional label first, then the
/// frame-major values). `#` lines and blanks are skipped.
pub fn write_features_text<W: Write>(ds: &FeatureDataset, mut w: W) -> Result<()> {
    writeln!(
        w,
        "ptrn-text {FEATURE_VERSION} {} {} {} {}",
        ds.num_frames,
        ds.stream_dim,
        ds.num_streams,
        ds.labeled() as u8
    )?;
    for s in &ds.sequences {
        let mut line = String::new();
        if let Some(label) = s.label {
            line.push_str(&label.to_string());
        }
        for frame in s.frames() {
            for v in frame {
                if !line.is_empty() {
                    line.push(' ');
                }
                line.push_str(&v.to_string());
            }
        }
        writeln!(w, "{line}")?;
    }
    Ok(())
}

pub fn read_features_text<R: BufRead>(r: R) -> Result<FeatureDataset> {
    let mut lines = r.lines().enumerate();
    let (header_line, header) = loop {
        match lines.next() {
            Some((i, line)) => {
                let line = line?;
                let t = line.trim().to_string();
                if !t.is_empty() && !t.starts_with('#') {
                    break (i + 1, t);
                }
            }
            None => {
                return Err(Error::Schema("empty feature text file".into()));
            }
        }
    };
    let toks: Vec<&str> = header.split_whitespace().collect();
    if toks.len() != 6 || toks[0] != "ptrn-text" {
        return Err(Error::Parse {
            line: header_line,
            message: "expected header: ptrn-text <version> <frames> <dim> <streams> <labels>"
                .into(),
        });
    }
    let version: u32 = parse_tok(toks[1], header_line, "version")?;
    if version != FEATURE_VERSION {
        return Err(Error::Version(format!(
            "unsupported feature file version {version} (expected {FEATURE_VERSION})"
        )));
    }
    let num_frames: usize = parse_tok(toks[2], header_line, "frame count")?;
    let stream_dim: usize = parse_tok(toks[3], header_line, "dimension")?;
    let num_streams: usize = parse_tok(toks[4], header_line, "stream count")?;
    let labels_flag: u8 = parse_tok(toks[5], header_line, "labels flag")?;
    if labels_flag > 1 {
        return Err(Error::Parse {
            line: header_line,
            message: format!("labels flag must be 0 or 1, found {labels_flag}"),
        });
    }
    let dim = stream_dim * num_streams;
    let expected = num_frames * dim + labels_flag as usize;
    let mut sequences = Vec::new();
    for (i, line) in lines {
        let line_no = i + 1;
        let raw = line?;
        let t = raw.trim();
        if t.is_empty() || t.starts_with('#') {
            continue;
        }
        let toks: Vec<&str> = t.split_whitespace().collect();
        if toks.len() != expected {
            return Err(Error::Parse {
                line: line_no,
                message: format!("expected {expected} tokens, found {}", toks.len()),
            });
        }
        let (label, values) = if labels_flag == 1 {
            (
                Some(parse_tok::<usize>(toks[0], line_no, "label")?),
                &toks[1..],
            )
        } else {
            (None, &toks[..])
        };
        let mut frames = Vec::with_capacity(num_frames);
        for f in 0..num_frames {
            let mut frame = Vec::with_capacity(dim);
            for v in &values[f * dim..(f + 1) * dim] {
                frame.push(parse_tok::<f64>(v, line_no, "feature value")?);
            }
            frames.push(frame);
        }
        sequences.push(FeatureSequence::new(frames, label)?);
    }
    FeatureDataset::new(sequences, num_streams)
}

fn parse_tok<T: std::str::FromStr>(tok: &str, line: usize, what: &str) -> Result<T> {
    tok.parse().map_err(|_| Error::Parse {
        line,
        message: format!("invalid {what}: {tok:?}"),
    })
}
