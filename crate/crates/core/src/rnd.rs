//! Random network distillation novelty detector.

use std::collections::VecDeque;
use std::path::Path;

use ndarray::Array2;
use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::checkpoint::{self, CheckpointError, TensorInfo};
use crate::nn::{stack_rows, Activation, Mlp, Momentum, ParamSet};
use crate::pmdp::{Observation, Snapshot, UnitId};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RndError {
    #[error("RND update on an empty batch")]
    EmptyBatch,
    #[error("non-finite RND loss {loss} at mini-batch {batch} (learning rate {learning_rate} too high?)")]
    NonFinite {
        loss: f64,
        batch: usize,
        learning_rate: f64,
    },
}

/// Per-dimension running mean and (population) variance, merged batch-wise
/// with Chan et al.'s parallel update.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunningStats {
    count: u64,
    mean: Vec<f64>,
    m2: Vec<f64>,
}

impl RunningStats {
    pub fn new(dim: usize) -> Self {
        RunningStats {
            count: 0,
            mean: vec![0.0; dim],
            m2: vec![0.0; dim],
        }
    }

    pub fn count(&self) -> u64 {
        self.count
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn variance(&self) -> Vec<f64> {
        if self.count == 0 {
            return vec![0.0; self.mean.len()];
        }
        self.m2.iter().map(|m| m / self.count as f64).collect()
    }

    pub fn update<'a, I>(&mut self, rows: I)
    where
        I: IntoIterator<Item = &'a [f64]>,
    {
        let dim = self.mean.len();
        let mut n = 0u64;
        let mut mean = vec![0.0; dim];
        let mut m2 = vec![0.0; dim];
        // Welford within the batch, then merge.
        for row in rows {
            n += 1;
            for k in 0..dim {
                let delta = row[k] - mean[k];
                mean[k] += delta / n as f64;
                m2[k] += delta * (row[k] - mean[k]);
            }
        }
        if n == 0 {
            return;
        }
        let total = self.count + n;
        for k in 0..dim {
            let delta = mean[k] - self.mean[k];
            self.mean[k] += delta * n as f64 / total as f64;
            self.m2[k] += m2[k] + delta * delta * self.count as f64 * n as f64 / total as f64;
        }
        self.count = total;
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RndConfig {
    pub input_dim: usize,
    pub hidden: usize,
    pub output: usize,
    pub obs_clip: f64,
    /// `is_novel` is false until this many rewards have been observed.
    pub warmup: u64,
    pub learning_rate: f64,
    pub momentum: f64,
    pub batch_size: usize,
}

impl Default for RndConfig {
    fn default() -> Self {
        RndConfig {
            input_dim: 24 * 24,
            hidden: 128,
            output: 32,
            obs_clip: 5.0,
            warmup: 1_000,
            learning_rate: 1e-4,
            momentum: 0.9,
            batch_size: 64,
        }
    }
}

#[derive(Clone, Debug)]
pub struct RndModule {
    config: RndConfig,
    target: Mlp,
    predictor: Mlp,
    obs_stats: RunningStats,
    reward_stats: RunningStats,
    optimizer: Momentum,
}

impl RndModule {
    pub fn new<R: Rng + ?Sized>(config: RndConfig, rng: &mut R) -> Self {
        let sizes = [config.input_dim, config.hidden, config.output];
        let target = Mlp::new(&sizes, Activation::Relu, Activation::Identity, rng);
        let predictor = Mlp::new(&sizes, Activation::Relu, Activation::Identity, rng);
        RndModule {
            config,
            target,
            predictor,
            obs_stats: RunningStats::new(config.input_dim),
            reward_stats: RunningStats::new(1),
            optimizer: Momentum::default(),
        }
    }

    pub fn config(&self) -> &RndConfig {
        &self.config
    }

    pub fn target(&self) -> &Mlp {
        &self.target
    }

    pub fn predictor(&self) -> &Mlp {
        &self.predictor
    }

    pub fn predictor_mut(&mut self) -> &mut Mlp {
        &mut self.predictor
    }

    pub fn obs_stats(&self) -> &RunningStats {
        &self.obs_stats
    }

    pub fn reward_stats(&self) -> &RunningStats {
        &self.reward_stats
    }

    /// Standardized, clipped network inputs.
    pub fn normalize(&self, observations: &[&Observation]) -> Array2<f64> {
        let dim = self.config.input_dim;
        let mut x = stack_rows(observations.iter().map(|o| o.values()), dim);
        if self.obs_stats.count() == 0 {
            return x;
        }
        let clip = self.config.obs_clip;
        let var = self.obs_stats.variance();
        let scale: Vec<f64> = var.iter().map(|v| 1.0 / (v + 1e-8).sqrt()).collect();
        let mean = self.obs_stats.mean();
        for mut row in x.outer_iter_mut() {
            for k in 0..dim {
                row[k] = ((row[k] - mean[k]) * scale[k]).clamp(-clip, clip);
            }
        }
        x
    }

    pub fn intrinsic_rewards(&self, observations: &[&Observation]) -> Vec<f64> {
        if observations.is_empty() {
            return Vec::new();
        }
        let x = self.normalize(observations);
        let t = self.target.forward(x.view());
        let p = self.predictor.forward(x.view());
        (&p - &t)
            .outer_iter()
            .map(|r| r.iter().map(|d| d * d).sum())
            .collect()
    }

    /// Squared distance between predictor and target outputs.
    pub fn intrinsic_reward(&self, observation: &Observation) -> f64 {
        self.intrinsic_rewards(&[observation])[0]
    }

    /// Reward divided by the running reward standard deviation, once warmed up.
    pub fn normalized_reward(&self, raw: f64) -> Option<f64> {
        if self.reward_stats.count() < self.config.warmup {
            return None;
        }
        let std = self.reward_stats.variance()[0].sqrt();
        (std > 1e-12).then(|| raw / std)
    }

    pub fn is_novel(&self, observation: &Observation, beta: f64) -> bool {
        self.novel_flags(&[observation], beta)[0]
    }

    pub fn novel_flags(&self, observations: &[&Observation], beta: f64) -> Vec<bool> {
        if self.reward_stats.count() < self.config.warmup {
            return vec![false; observations.len()];
        }
        self.intrinsic_rewards(observations)
            .into_iter()
            .map(|r| self.normalized_reward(r).is_some_and(|z| z > beta))
            .collect()
    }

    /// Update observation and reward normalizers from `batch` without training.
    pub fn update_normalizers(&mut self, batch: &[&Observation]) {
        let rows: Vec<Vec<f64>> = batch
            .iter()
            .map(|o| o.values().iter().map(|&v| v as f64).collect())
            .collect();
        self.obs_stats.update(rows.iter().map(|r| r.as_slice()));
        let rewards = self.intrinsic_rewards(batch);
        self.reward_stats.update(rewards.iter().map(std::slice::from_ref));
    }

    /// Refresh both normalizers from `batch`, then take one SGD step per
    /// mini-batch on the predictor. Returns the mean predictor loss.
    pub fn update(&mut self, batch: &[&Observation]) -> Result<f64, RndError> {
        if batch.is_empty() {
            return Err(RndError::EmptyBatch);
        }
        self.update_normalizers(batch);
        let mut total = 0.0;
        for (k, chunk) in batch.chunks(self.config.batch_size.max(1)).enumerate() {
            let (loss, grads) = self.predictor_loss_and_grad(chunk);
            if !loss.is_finite() || !grads.all_finite() {
                return Err(RndError::NonFinite {
                    loss,
                    batch: k,
                    learning_rate: self.config.learning_rate,
                });
            }
            self.optimizer.step(
                &mut self.predictor,
                &grads,
                self.config.learning_rate,
                self.config.momentum,
            );
            total += loss * chunk.len() as f64;
        }
        Ok(total / batch.len() as f64)
    }

    /// Mean over the batch of `||predictor(x) - target(x)||^2` and its predictor gradient.
    pub fn predictor_loss_and_grad(&self, batch: &[&Observation]) -> (f64, Mlp) {
        let x = self.normalize(batch);
        let target = self.target.forward(x.view());
        let trace = self.predictor.forward_trace(x);
        let diff: Array2<f64> = trace.output() - &target;
        let m = batch.len() as f64;
        let loss = diff.iter().map(|d| d * d).sum::<f64>() / m;
        let grad_out = diff.mapv(|d| 2.0 * d / m);
        let mut grads = self.predictor.zeros_like();
        self.predictor.backward(&trace, grad_out, &mut grads);
        (loss, grads)
    }

    fn tensor_infos(&self) -> Vec<TensorInfo> {
        let mut shapes = self.target.shapes("target");
        shapes.extend(self.predictor.shapes("predictor"));
        shapes.push(("obs.mean".into(), vec![self.config.input_dim]));
        shapes.push(("obs.m2".into(), vec![self.config.input_dim]));
        shapes.push(("reward.stats".into(), vec![3]));
        shapes
            .into_iter()
            .map(|(name, shape)| TensorInfo { name, shape })
            .collect()
    }

    pub fn to_checkpoint(&self) -> Vec<u8> {
        let reward = [
            self.reward_stats.count as f64,
            self.reward_stats.mean[0],
            self.reward_stats.m2[0],
        ];
        let mut slices = self.target.param_slices();
        slices.extend(self.predictor.param_slices());
        slices.push(&self.obs_stats.mean);
        slices.push(&self.obs_stats.m2);
        slices.push(&reward);
        let tensors: Vec<(TensorInfo, &[f64])> =
            self.tensor_infos().into_iter().zip(slices).collect();
        let meta = serde_json::json!({
            "config": self.config,
            "obs_count": self.obs_stats.count,
        });
        checkpoint::encode("rnd", meta, &tensors)
    }

    pub fn from_checkpoint(bytes: &[u8]) -> Result<Self, CheckpointError> {
        let end = bytes.iter().position(|&b| b == b'\n').unwrap_or(bytes.len());
        let header: checkpoint::Header = serde_json::from_slice(&bytes[..end])
            .map_err(|e| CheckpointError::Header(e.to_string()))?;
        let config: RndConfig = serde_json::from_value(header.meta["config"].clone())
            .map_err(|e| CheckpointError::Header(format!("config: {e}")))?;
        let obs_count = header.meta["obs_count"]
            .as_u64()
            .ok_or_else(|| CheckpointError::Header("obs_count".into()))?;
        let mut rng = rand::rngs::mock::StepRng::new(0, 0);
        let mut module = RndModule::new(config, &mut rng);
        let (_, mut tensors) = checkpoint::decode(bytes, "rnd", &module.tensor_infos())?;
        let reward = tensors.pop().expect("reward stats");
        module.obs_stats.m2 = tensors.pop().expect("obs m2");
        module.obs_stats.mean = tensors.pop().expect("obs mean");
        module.obs_stats.count = obs_count;
        module.reward_stats = RunningStats {
            count: reward[0] as u64,
            mean: vec![reward[1]],
            m2: vec![reward[2]],
        };
        let mut slices = module.target.param_slices_mut();
        slices.extend(module.predictor.param_slices_mut());
        for (dst, src) in slices.into_iter().zip(tensors) {
            dst.copy_from_slice(&src);
        }
        Ok(module)
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        checkpoint::write_file(path, &self.to_checkpoint())
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        Self::from_checkpoint(&std::fs::read(path)?)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NovelState {
    pub observation: Observation,
    pub snapshot: Snapshot,
    pub unit: Option<UnitId>,
}

/// Bounded FIFO of states flagged as novel.
#[derive(Clone, Debug)]
pub struct NoveltyBuffer {
    capacity: usize,
    entries: VecDeque<NovelState>,
}

impl NoveltyBuffer {
    pub fn new(capacity: usize) -> Self {
        NoveltyBuffer {
            capacity,
            entries: VecDeque::with_capacity(capacity.min(1024)),
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    /// Oldest entries are evicted once full.
    pub fn push(&mut self, state: NovelState) {
        if self.capacity == 0 {
            return;
        }
        if self.entries.len() == self.capacity {
            self.entries.pop_front();
        }
        self.entries.push_back(state);
    }

    /// Remove and return up to `count` entries chosen uniformly without replacement.
    pub fn draw<R: Rng + ?Sized>(&mut self, count: usize, rng: &mut R) -> Vec<NovelState> {
        let k = count.min(self.entries.len());
        let mut picked = index::sample(rng, self.entries.len(), k).into_vec();
        picked.sort_unstable();
        let mut out = Vec::with_capacity(k);
        for &i in picked.iter().rev() {
            out.push(self.entries.remove(i).expect("index in range"));
        }
        out.reverse();
        out
    }
}

/// Convenience for tests: the reward normalizer's running standard deviation.
pub fn reward_std(module: &RndModule) -> f64 {
    module.reward_stats().variance()[0].sqrt()
}
