//! Learned reachability-style similarity between observations.
//!
//! States fewer than `n` steps apart in a trajectory are labelled similar (1),
//! states more than `N` steps apart dissimilar (0); the model is a binary
//! classifier over concatenated observation embeddings trained with BCE.

use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};

use ndarray::{s, Array1, Array2, Axis};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::checkpoint::{self, CheckpointError, TensorInfo};
use crate::nn::{sigmoid, stack_rows, Activation, Dense, Mlp, Momentum, ParamSet};
use crate::pmdp::{Observation, UnitId};

/// Model versions are globally unique so that separately trained clones never
/// share one.
fn next_version() -> u64 {
    static NEXT: AtomicU64 = AtomicU64::new(1);
    NEXT.fetch_add(1, Ordering::Relaxed)
}

/// BCE probabilities are clamped to `[PROB_CLAMP, 1 - PROB_CLAMP]`.
pub const PROB_CLAMP: f64 = 1e-7;

/// What the cluster graph needs from a similarity measure.
///
/// Features are computed once per state and reused across comparisons; `score`
/// must agree with evaluating the measure on the two original states.
pub trait Similarity {
    fn features(&self, states: &[StateRef<'_>]) -> Vec<Vec<f64>>;

    /// Similarity of `query` to each center, in `[0, 1]`.
    fn score_many(&self, centers: &[&[f64]], query: &[f64]) -> Vec<f64>;

    fn score(&self, center: &[f64], query: &[f64]) -> f64 {
        self.score_many(&[center], query)[0]
    }

    /// Changes whenever scores for fixed inputs may change (i.e. after training).
    fn version(&self) -> u64;
}

#[derive(Clone, Copy, Debug)]
pub struct StateRef<'a> {
    pub observation: &'a Observation,
    /// Ground truth, only read by test oracles.
    pub unit: Option<UnitId>,
}

/// Exact ground-truth similarity: 1 when two states share a unit, else 0.
#[derive(Clone, Copy, Debug, Default)]
pub struct UnitOracle;

impl Similarity for UnitOracle {
    fn features(&self, states: &[StateRef<'_>]) -> Vec<Vec<f64>> {
        states
            .iter()
            .map(|s| vec![s.unit.map_or(-1.0, |u| u.0 as f64)])
            .collect()
    }

    fn score_many(&self, centers: &[&[f64]], query: &[f64]) -> Vec<f64> {
        centers
            .iter()
            .map(|c| if c[0] >= 0.0 && c[0] == query[0] { 1.0 } else { 0.0 })
            .collect()
    }

    fn version(&self) -> u64 {
        0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PairExample {
    pub a: Observation,
    pub b: Observation,
    pub label: u8,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct PairDataset {
    pub examples: Vec<PairExample>,
}

impl PairDataset {
    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn positives(&self) -> usize {
        self.examples.iter().filter(|e| e.label == 1).count()
    }

    pub fn negatives(&self) -> usize {
        self.len() - self.positives()
    }

    pub fn extend(&mut self, other: PairDataset) {
        self.examples.extend(other.examples);
    }

    fn from_indices(
        pairs: Vec<(usize, usize, u8)>,
        first: &[Observation],
        second: &[Observation],
    ) -> Self {
        PairDataset {
            examples: pairs
                .into_iter()
                .map(|(i, j, label)| PairExample {
                    a: first[i].clone(),
                    b: second[j].clone(),
                    label,
                })
                .collect(),
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimilarityError {
    #[error("pair thresholds must satisfy 0 < n < N, got n={n}, N={big_n}")]
    Thresholds { n: usize, big_n: usize },
    #[error("training needs both classes, got {positives} positives and {negatives} negatives")]
    OneClass { positives: usize, negatives: usize },
    #[error("non-finite loss {loss} at epoch {epoch}, batch {batch} (learning rate {learning_rate} too high?)")]
    NonFinite {
        loss: f64,
        epoch: usize,
        batch: usize,
        learning_rate: f64,
    },
    #[error("observation has {actual} cells, model expects {expected}")]
    Shape { expected: usize, actual: usize },
}

/// Index pairs `(i, j, label)` from one trajectory of length `len`.
///
/// Positives satisfy `|i - j| < n`, negatives `|i - j| > big_n`; pairs in between
/// are never produced. Half of `count` goes to each class; a class that cannot be
/// formed is simply left out. Each pair is emitted in either order with equal odds.
pub fn sample_pair_indices<R: Rng + ?Sized>(
    len: usize,
    n: usize,
    big_n: usize,
    count: usize,
    rng: &mut R,
) -> Result<Vec<(usize, usize, u8)>, SimilarityError> {
    if n == 0 || n >= big_n {
        return Err(SimilarityError::Thresholds { n, big_n });
    }
    let negatives_possible = len > big_n + 1;
    if len < 2 || (len < n + 1 && !negatives_possible) {
        return Ok(Vec::new());
    }
    let n_neg = if negatives_possible { count / 2 } else { 0 };
    let n_pos = count - count / 2;
    let mut out = Vec::with_capacity(n_pos + n_neg);
    for _ in 0..n_pos {
        let i = rng.gen_range(0..len);
        let lo = i.saturating_sub(n - 1);
        let hi = (i + n - 1).min(len - 1);
        let j = rng.gen_range(lo..=hi);
        out.push((i, j, 1));
    }
    // Only indices with a partner more than N away can anchor a negative.
    let anchors: Vec<usize> = (0..len)
        .filter(|&i| i > big_n || i + big_n + 1 < len)
        .collect();
    for _ in 0..n_neg {
        let i = *anchors.choose(rng).expect("negatives possible");
        let left = i.saturating_sub(big_n);
        let right = len.saturating_sub(i + big_n + 1);
        let k = rng.gen_range(0..left + right);
        let j = if k < left { k } else { i + big_n + 1 + (k - left) };
        out.push((i, j, 0));
    }
    for p in out.iter_mut() {
        if rng.gen_bool(0.5) {
            *p = (p.1, p.0, p.2);
        }
    }
    Ok(out)
}

pub fn generate_pairs<R: Rng + ?Sized>(
    trajectory: &[Observation],
    n: usize,
    big_n: usize,
    count: usize,
    rng: &mut R,
) -> Result<PairDataset, SimilarityError> {
    let idx = sample_pair_indices(trajectory.len(), n, big_n, count, rng)?;
    Ok(PairDataset::from_indices(idx, trajectory, trajectory))
}

/// Path distance used for prefix negatives: the position of `s1` in the
/// trajectory plus the distance of `s2` from the end of the prefix.
pub fn prefix_distance(trajectory_index: usize, offset_from_prefix_end: usize) -> usize {
    trajectory_index + offset_from_prefix_end
}

/// Negative index pairs `(trajectory index, prefix index)` whose path distance exceeds `big_n`.
pub fn sample_prefix_negative_indices<R: Rng + ?Sized>(
    trajectory_len: usize,
    prefix_len: usize,
    big_n: usize,
    count: usize,
    rng: &mut R,
) -> Vec<(usize, usize)> {
    if prefix_len == 0 {
        return Vec::new();
    }
    let max_offset = prefix_len - 1;
    let anchors: Vec<usize> = (0..trajectory_len)
        .filter(|&i| prefix_distance(i, max_offset) > big_n)
        .collect();
    if anchors.is_empty() {
        return Vec::new();
    }
    (0..count)
        .map(|_| {
            let i = *anchors.choose(rng).unwrap();
            let min_offset = (big_n + 1).saturating_sub(i);
            let offset = rng.gen_range(min_offset..=max_offset);
            (i, max_offset - offset)
        })
        .collect()
}

pub fn generate_prefix_negatives<R: Rng + ?Sized>(
    trajectory: &[Observation],
    full_prefix: &[Observation],
    big_n: usize,
    count: usize,
    rng: &mut R,
) -> PairDataset {
    let idx = sample_prefix_negative_indices(trajectory.len(), full_prefix.len(), big_n, count, rng);
    let examples = idx
        .into_iter()
        .map(|(i, k)| {
            let (a, b) = (trajectory[i].clone(), full_prefix[k].clone());
            let (a, b) = if rng.gen_bool(0.5) { (b, a) } else { (a, b) };
            PairExample { a, b, label: 0 }
        })
        .collect();
    PairDataset { examples }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimilarityConfig {
    pub input_dim: usize,
    pub encoder_hidden: usize,
    pub embedding_dim: usize,
    pub head_hidden: usize,
}

impl Default for SimilarityConfig {
    fn default() -> Self {
        SimilarityConfig {
            input_dim: 24 * 24,
            encoder_hidden: 64,
            embedding_dim: 64,
            head_hidden: 64,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainOptions {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
}

impl Default for TrainOptions {
    fn default() -> Self {
        TrainOptions {
            epochs: 4,
            batch_size: 64,
            learning_rate: 1e-3,
            momentum: 0.9,
        }
    }
}

/// `R(a, b) = sigmoid(tail(relu(E(a) Wa + E(b) Wb + c)))` with a shared encoder `E`.
#[derive(Clone, Debug)]
pub struct SimilarityModel {
    config: SimilarityConfig,
    encoder: Mlp,
    /// First head layer, split by which side of the pair it reads.
    head_a: Array2<f64>,
    head_b: Array2<f64>,
    head_bias: Array1<f64>,
    tail: Mlp,
    optimizer: Momentum,
    version: u64,
}

/// Gradient container with the model's shapes.
struct Grads {
    encoder: Mlp,
    head_a: Array2<f64>,
    head_b: Array2<f64>,
    head_bias: Array1<f64>,
    tail: Mlp,
}

macro_rules! head_slices {
    ($self:ident, $as_slice:ident, $slices:ident) => {{
        let mut v = $self.encoder.$slices();
        v.push($self.head_a.$as_slice().expect("standard layout"));
        v.push($self.head_b.$as_slice().expect("standard layout"));
        v.push($self.head_bias.$as_slice().expect("standard layout"));
        v.extend($self.tail.$slices());
        v
    }};
}

impl ParamSet for SimilarityModel {
    fn param_slices(&self) -> Vec<&[f64]> {
        head_slices!(self, as_slice, param_slices)
    }

    fn param_slices_mut(&mut self) -> Vec<&mut [f64]> {
        head_slices!(self, as_slice_mut, param_slices_mut)
    }
}

impl ParamSet for Grads {
    fn param_slices(&self) -> Vec<&[f64]> {
        head_slices!(self, as_slice, param_slices)
    }

    fn param_slices_mut(&mut self) -> Vec<&mut [f64]> {
        head_slices!(self, as_slice_mut, param_slices_mut)
    }
}

impl SimilarityModel {
    pub fn new<R: Rng + ?Sized>(config: SimilarityConfig, rng: &mut R) -> Self {
        let encoder = Mlp::new(
            &[config.input_dim, config.encoder_hidden, config.embedding_dim],
            Activation::Relu,
            Activation::Relu,
            rng,
        );
        let first = Dense::new(2 * config.embedding_dim, config.head_hidden, Activation::Relu, rng);
        let d = config.embedding_dim;
        let head_a = first.weight.slice(s![..d, ..]).to_owned();
        let head_b = first.weight.slice(s![d.., ..]).to_owned();
        let mut tail = Mlp::new(
            &[config.head_hidden, config.head_hidden, 1],
            Activation::Relu,
            Activation::Identity,
            rng,
        );
        // Small output weights and a zero bias start every prediction near 0.5.
        let last = tail.layers.last_mut().unwrap();
        last.weight.mapv_inplace(|w| w * 0.1);
        SimilarityModel {
            config,
            encoder,
            head_a,
            head_b,
            head_bias: Array1::zeros(config.head_hidden),
            tail,
            optimizer: Momentum::default(),
            version: next_version(),
        }
    }

    pub fn config(&self) -> &SimilarityConfig {
        &self.config
    }

    fn zero_grads(&self) -> Grads {
        Grads {
            encoder: self.encoder.zeros_like(),
            head_a: Array2::zeros(self.head_a.raw_dim()),
            head_b: Array2::zeros(self.head_b.raw_dim()),
            head_bias: Array1::zeros(self.head_bias.len()),
            tail: self.tail.zeros_like(),
        }
    }

    fn check_shape(&self, obs: &Observation) -> Result<(), SimilarityError> {
        if obs.len() != self.config.input_dim {
            return Err(SimilarityError::Shape {
                expected: self.config.input_dim,
                actual: obs.len(),
            });
        }
        Ok(())
    }

    /// Embeddings, `(batch, d)`.
    pub fn embed(&self, observations: &[&Observation]) -> Array2<f64> {
        let x = stack_rows(observations.iter().map(|o| o.values()), self.config.input_dim);
        self.encoder.forward(x.view())
    }

    pub fn predict(&self, a: &Observation, b: &Observation) -> Result<f64, SimilarityError> {
        self.check_shape(a)?;
        self.check_shape(b)?;
        let f = self.features(&[
            StateRef { observation: a, unit: None },
            StateRef { observation: b, unit: None },
        ]);
        Ok(self.score(&f[0], &f[1]))
    }

    /// Logits for a batch of pairs, with everything needed for backprop.
    fn forward_pairs(&self, pairs: &[&PairExample]) -> PairForward {
        let dim = self.config.input_dim;
        let x = stack_rows(
            pairs
                .iter()
                .map(|p| p.a.values())
                .chain(pairs.iter().map(|p| p.b.values())),
            dim,
        );
        let enc = self.encoder.forward_trace(x);
        let m = pairs.len();
        let emb = enc.output();
        let ea = emb.slice(s![..m, ..]);
        let eb = emb.slice(s![m.., ..]);
        let mut z = ea.dot(&self.head_a);
        z += &eb.dot(&self.head_b);
        z += &self.head_bias;
        z.mapv_inplace(|v| v.max(0.0));
        let tail = self.tail.forward_trace(z);
        let logits = tail.output().column(0).to_owned();
        PairForward { enc, tail, logits }
    }

    /// Mean clamped BCE and its gradient for a batch.
    fn loss_and_grad(&self, pairs: &[&PairExample]) -> (f64, Grads) {
        let fwd = self.forward_pairs(pairs);
        let m = pairs.len();
        let mut loss = 0.0;
        let mut dlogit = Array2::zeros((m, 1));
        for (k, (p, &logit)) in pairs.iter().zip(fwd.logits.iter()).enumerate() {
            let prob = sigmoid(logit);
            let clamped = prob.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
            let y = p.label as f64;
            loss -= y * clamped.ln() + (1.0 - y) * (1.0 - clamped).ln();
            if prob == clamped {
                dlogit[[k, 0]] = (prob - y) / m as f64;
            }
        }
        loss /= m as f64;

        let mut grads = self.zero_grads();
        let dz = self.tail.backward(&fwd.tail, dlogit, &mut grads.tail);
        // relu(z) is the tail input.
        let mut dz = dz;
        dz.zip_mut_with(&fwd.tail.outputs[0], |g, &h| {
            if h <= 0.0 {
                *g = 0.0
            }
        });
        let emb = fwd.enc.output();
        let ea = emb.slice(s![..m, ..]);
        let eb = emb.slice(s![m.., ..]);
        grads.head_a += &ea.t().dot(&dz);
        grads.head_b += &eb.t().dot(&dz);
        grads.head_bias += &dz.sum_axis(Axis(0));
        let mut demb = Array2::zeros(emb.raw_dim());
        demb.slice_mut(s![..m, ..]).assign(&dz.dot(&self.head_a.t()));
        demb.slice_mut(s![m.., ..]).assign(&dz.dot(&self.head_b.t()));
        self.encoder.backward(&fwd.enc, demb, &mut grads.encoder);
        (loss, grads)
    }

    /// Mean clamped BCE over a dataset, without updating anything.
    pub fn loss(&self, data: &PairDataset) -> f64 {
        let refs: Vec<&PairExample> = data.examples.iter().collect();
        refs.chunks(256)
            .map(|c| self.batch_loss(c) * c.len() as f64)
            .sum::<f64>()
            / data.len().max(1) as f64
    }

    fn batch_loss(&self, pairs: &[&PairExample]) -> f64 {
        let fwd = self.forward_pairs(pairs);
        pairs
            .iter()
            .zip(fwd.logits.iter())
            .map(|(p, &logit)| {
                let prob = sigmoid(logit).clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
                let y = p.label as f64;
                -(y * prob.ln() + (1.0 - y) * (1.0 - prob).ln())
            })
            .sum::<f64>()
            / pairs.len() as f64
    }

    /// Analytic gradient of the mean loss over `pairs`, flattened in `ParamSet` order.
    pub fn gradient(&self, pairs: &[PairExample]) -> (f64, Vec<f64>) {
        let refs: Vec<&PairExample> = pairs.iter().collect();
        let (loss, grads) = self.loss_and_grad(&refs);
        (loss, grads.flat_params())
    }

    /// Mini-batch SGD with momentum; returns the mean loss of each epoch.
    pub fn train<R: Rng + ?Sized>(
        &mut self,
        data: &PairDataset,
        options: &TrainOptions,
        rng: &mut R,
    ) -> Result<Vec<f64>, SimilarityError> {
        let (positives, negatives) = (data.positives(), data.negatives());
        if positives == 0 || negatives == 0 {
            return Err(SimilarityError::OneClass {
                positives,
                negatives,
            });
        }
        for e in &data.examples {
            self.check_shape(&e.a)?;
            self.check_shape(&e.b)?;
        }
        let mut order: Vec<usize> = (0..data.len()).collect();
        let mut history = Vec::with_capacity(options.epochs);
        for epoch in 0..options.epochs {
            order.shuffle(rng);
            let mut total = 0.0;
            for (batch, chunk) in order.chunks(options.batch_size.max(1)).enumerate() {
                let pairs: Vec<&PairExample> = chunk.iter().map(|&i| &data.examples[i]).collect();
                let (loss, grads) = self.loss_and_grad(&pairs);
                if !loss.is_finite() || !grads.all_finite() {
                    return Err(SimilarityError::NonFinite {
                        loss,
                        epoch,
                        batch,
                        learning_rate: options.learning_rate,
                    });
                }
                let mut optimizer = std::mem::take(&mut self.optimizer);
                optimizer.step(self, &grads, options.learning_rate, options.momentum);
                self.optimizer = optimizer;
                if !self.all_finite() {
                    return Err(SimilarityError::NonFinite {
                        loss: f64::NAN,
                        epoch,
                        batch,
                        learning_rate: options.learning_rate,
                    });
                }
                total += loss * chunk.len() as f64;
            }
            history.push(total / data.len() as f64);
        }
        self.version = next_version();
        Ok(history)
    }

    fn tensor_infos(&self) -> Vec<TensorInfo> {
        let mut shapes = self.encoder.shapes("encoder");
        shapes.push(("head.a".into(), self.head_a.shape().to_vec()));
        shapes.push(("head.b".into(), self.head_b.shape().to_vec()));
        shapes.push(("head.bias".into(), vec![self.head_bias.len()]));
        shapes.extend(self.tail.shapes("tail"));
        shapes
            .into_iter()
            .map(|(name, shape)| TensorInfo { name, shape })
            .collect()
    }

    pub fn to_checkpoint(&self) -> Vec<u8> {
        let infos = self.tensor_infos();
        let slices = self.param_slices();
        let tensors: Vec<(TensorInfo, &[f64])> = infos.into_iter().zip(slices).collect();
        let meta = serde_json::json!({
            "config": self.config,
            "d": self.config.embedding_dim,
        });
        checkpoint::encode("similarity", meta, &tensors)
    }

    pub fn from_checkpoint(bytes: &[u8]) -> Result<Self, CheckpointError> {
        let header_end = bytes.iter().position(|&b| b == b'\n').unwrap_or(bytes.len());
        let header: checkpoint::Header = serde_json::from_slice(&bytes[..header_end])
            .map_err(|e| CheckpointError::Header(e.to_string()))?;
        let config: SimilarityConfig = serde_json::from_value(header.meta["config"].clone())
            .map_err(|e| CheckpointError::Header(format!("config: {e}")))?;
        let mut rng = rand::rngs::mock::StepRng::new(0, 0);
        let mut model = SimilarityModel::new(config, &mut rng);
        let (_, tensors) = checkpoint::decode(bytes, "similarity", &model.tensor_infos())?;
        for (dst, src) in model.param_slices_mut().into_iter().zip(tensors) {
            dst.copy_from_slice(&src);
        }
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        checkpoint::write_file(path, &self.to_checkpoint())
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        Self::from_checkpoint(&std::fs::read(path)?)
    }
}

struct PairForward {
    enc: crate::nn::Trace,
    tail: crate::nn::Trace,
    logits: Array1<f64>,
}

impl Similarity for SimilarityModel {
    /// `[E(s) Wa, E(s) Wb + c]`: the state's contribution to the first head layer
    /// as the center (left) or the query (right) of a pair.
    fn features(&self, states: &[StateRef<'_>]) -> Vec<Vec<f64>> {
        if states.is_empty() {
            return Vec::new();
        }
        let obs: Vec<&Observation> = states.iter().map(|s| s.observation).collect();
        let emb = self.embed(&obs);
        let pa = emb.dot(&self.head_a);
        let mut pb = emb.dot(&self.head_b);
        pb += &self.head_bias;
        pa.outer_iter()
            .zip(pb.outer_iter())
            .map(|(a, b)| a.iter().chain(b.iter()).copied().collect())
            .collect()
    }

    fn score_many(&self, centers: &[&[f64]], query: &[f64]) -> Vec<f64> {
        let h = self.config.head_hidden;
        let q = &query[h..];
        let mut z = Array2::zeros((centers.len(), h));
        for (mut row, c) in z.outer_iter_mut().zip(centers) {
            for ((dst, &ca), &qb) in row.iter_mut().zip(&c[..h]).zip(q) {
                *dst = (ca + qb).max(0.0);
            }
        }
        self.tail
            .forward(z.view())
            .column(0)
            .iter()
            .map(|&l| sigmoid(l))
            .collect()
    }

    fn version(&self) -> u64 {
        self.version
    }
}
