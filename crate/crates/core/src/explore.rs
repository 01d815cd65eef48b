//! The exploration loop: rollouts from sampled clusters, novelty-seeded side
//! rollouts, similarity training, graph updates and RND training.

use std::collections::BTreeSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::{ClusterGraph, ClusterId};
use crate::pmdp::{Action, EnvError, Observation, PersistentMdp, Snapshot, UnitId, NUM_ACTIONS};
use crate::rnd::{NovelState, NoveltyBuffer, RndConfig, RndError, RndModule};
use crate::similarity::{
    generate_pairs, generate_prefix_negatives, PairDataset, Similarity, SimilarityConfig,
    SimilarityError, SimilarityModel, StateRef, TrainOptions, UnitOracle,
};
use crate::trajectory::{Trajectory, TrajectoryStep};

/// Action distribution for rollouts.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum ExplorationPolicy {
    /// Each of the seven actions with probability 1/7.
    #[default]
    Uniform,
    /// Always the same action; for scripted tests.
    Constant(Action),
}

impl ExplorationPolicy {
    pub fn probability(&self, action: Action) -> f64 {
        match self {
            ExplorationPolicy::Uniform => 1.0 / NUM_ACTIONS as f64,
            ExplorationPolicy::Constant(a) => f64::from(u8::from(*a == action)),
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Action {
        match self {
            ExplorationPolicy::Uniform => Action::sample(rng),
            ExplorationPolicy::Constant(a) => *a,
        }
    }
}

/// Restore `start` and act for up to `max_steps` steps, stopping early on death.
/// The fatal state is not recorded; `died` is set instead.
pub fn rollout<E, R>(
    env: &mut E,
    start: &Snapshot,
    policy: &ExplorationPolicy,
    max_steps: usize,
    rng: &mut R,
) -> Result<Trajectory, EnvError>
where
    E: PersistentMdp + ?Sized,
    R: Rng + ?Sized,
{
    env.restore_snapshot(start)?;
    let mut trajectory = Trajectory {
        steps: Vec::with_capacity(max_steps),
        died: false,
        env_steps: 0,
    };
    for _ in 0..max_steps {
        let result = env.step(policy.sample(rng))?;
        trajectory.env_steps += result.env_steps_consumed;
        if result.terminated {
            trajectory.died = true;
            break;
        }
        trajectory.steps.push(TrajectoryStep {
            observation: result.observation,
            snapshot: env.save_snapshot(),
            unit: env.unit().ok(),
        });
    }
    Ok(trajectory)
}

#[derive(Debug, Error)]
pub enum ExploreError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error("similarity training failed at iteration {iteration}: {source}")]
    Similarity {
        iteration: u64,
        source: SimilarityError,
    },
    #[error("RND training failed at iteration {iteration}: {source}")]
    Rnd { iteration: u64, source: RndError },
    #[error("writing iteration report: {0}")]
    Sink(#[from] std::io::Error),
}

/// All knobs of the loop. Defaults are the desk-scale values; see [`RbConfig::full_scale`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RbConfig {
    pub theta_sim: f64,
    pub theta_merge: f64,
    pub merge_every: u64,
    /// Clusters sampled (and rollouts run) per iteration.
    pub clusters_per_iteration: usize,
    /// Novel states drawn for side rollouts per iteration.
    pub novel_rollouts: usize,
    /// Positive pairs are fewer than `n` steps apart.
    pub n: usize,
    /// Negative pairs are more than `big_n` steps apart.
    pub big_n: usize,
    pub beta_intrinsic: f64,
    pub max_rollout_steps: usize,
    pub pretrain_steps: u64,
    /// Also train the RND predictor (not just its normalizers) while pretraining.
    pub pretrain_rnd_training: bool,
    pub pairs_per_trajectory: usize,
    pub prefix_negatives_per_trajectory: usize,
    pub novelty_capacity: usize,
    pub sim_epochs: usize,
    pub sim_batch_size: usize,
    pub sim_learning_rate: f64,
    pub sim_momentum: f64,
    pub sim_encoder_hidden: usize,
    pub sim_embedding_dim: usize,
    pub sim_head_hidden: usize,
    pub rnd_learning_rate: f64,
    pub rnd_momentum: f64,
    pub rnd_batch_size: usize,
    pub rnd_hidden: usize,
    pub rnd_output: usize,
    pub rnd_warmup: u64,
    pub no_merge: bool,
    pub no_prefix_negatives: bool,
    pub seed: u64,
    /// Total environment steps, pretraining and side rollouts included.
    pub budget: u64,
}

impl Default for RbConfig {
    fn default() -> Self {
        let sim = SimilarityConfig::default();
        let train = TrainOptions::default();
        let rnd = RndConfig::default();
        RbConfig {
            theta_sim: 0.5,
            theta_merge: 0.5,
            merge_every: 15,
            clusters_per_iteration: 30,
            novel_rollouts: 100,
            n: 5,
            big_n: 25,
            beta_intrinsic: 2.5,
            max_rollout_steps: 300,
            pretrain_steps: 50_000,
            pretrain_rnd_training: false,
            pairs_per_trajectory: 16,
            prefix_negatives_per_trajectory: 4,
            novelty_capacity: 10_000,
            sim_epochs: train.epochs,
            sim_batch_size: train.batch_size,
            sim_learning_rate: train.learning_rate,
            sim_momentum: train.momentum,
            sim_encoder_hidden: sim.encoder_hidden,
            sim_embedding_dim: sim.embedding_dim,
            sim_head_hidden: sim.head_hidden,
            rnd_learning_rate: rnd.learning_rate,
            rnd_momentum: rnd.momentum,
            rnd_batch_size: rnd.batch_size,
            rnd_hidden: rnd.hidden,
            rnd_output: rnd.output,
            rnd_warmup: rnd.warmup,
            no_merge: false,
            no_prefix_negatives: false,
            seed: 0,
            budget: 200_000,
        }
    }
}

impl RbConfig {
    /// The original, much larger scale: long rollouts, many side rollouts and
    /// a long pretraining phase.
    pub fn full_scale() -> Self {
        RbConfig {
            novel_rollouts: 1_000,
            max_rollout_steps: 1_500,
            pretrain_steps: 500_000,
            budget: 10_000_000,
            ..RbConfig::default()
        }
    }

    pub fn validate(&self) -> Result<(), ExploreError> {
        let err = |m: String| Err(ExploreError::Config(m));
        for (name, v) in [("theta_sim", self.theta_sim), ("theta_merge", self.theta_merge)] {
            if !(v > 0.0 && v < 1.0) {
                return err(format!("{name} must lie in (0, 1), got {v}"));
            }
        }
        if self.n == 0 || self.n >= self.big_n {
            return err(format!("need 0 < n < big_n, got n={} big_n={}", self.n, self.big_n));
        }
        for (name, v) in [
            ("clusters_per_iteration", self.clusters_per_iteration),
            ("max_rollout_steps", self.max_rollout_steps),
            ("sim_batch_size", self.sim_batch_size),
            ("rnd_batch_size", self.rnd_batch_size),
            ("sim_encoder_hidden", self.sim_encoder_hidden),
            ("sim_embedding_dim", self.sim_embedding_dim),
            ("sim_head_hidden", self.sim_head_hidden),
            ("rnd_hidden", self.rnd_hidden),
            ("rnd_output", self.rnd_output),
        ] {
            if v == 0 {
                return err(format!("{name} must be at least 1"));
            }
        }
        if self.merge_every == 0 {
            return err("merge_every must be at least 1".into());
        }
        if self.budget == 0 {
            return err("budget must be positive".into());
        }
        for (name, v) in [
            ("sim_learning_rate", self.sim_learning_rate),
            ("rnd_learning_rate", self.rnd_learning_rate),
            ("beta_intrinsic", self.beta_intrinsic),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return err(format!("{name} must be positive, got {v}"));
            }
        }
        for (name, v) in [("sim_momentum", self.sim_momentum), ("rnd_momentum", self.rnd_momentum)] {
            if !(0.0..1.0).contains(&v) {
                return err(format!("{name} must lie in [0, 1), got {v}"));
            }
        }
        Ok(())
    }

    fn train_options(&self) -> TrainOptions {
        TrainOptions {
            epochs: self.sim_epochs,
            batch_size: self.sim_batch_size,
            learning_rate: self.sim_learning_rate,
            momentum: self.sim_momentum,
        }
    }

    fn rnd_config(&self, input_dim: usize) -> RndConfig {
        RndConfig {
            input_dim,
            hidden: self.rnd_hidden,
            output: self.rnd_output,
            warmup: self.rnd_warmup,
            learning_rate: self.rnd_learning_rate,
            momentum: self.rnd_momentum,
            batch_size: self.rnd_batch_size,
            ..RndConfig::default()
        }
    }
}

/// Learned similarity or the ground-truth unit oracle.
#[derive(Clone, Debug)]
#[allow(clippy::large_enum_variant)] // one per run
pub enum SimilarityMode {
    Learned(SimilarityModel),
    Oracle(UnitOracle),
}

impl SimilarityMode {
    pub fn is_oracle(&self) -> bool {
        matches!(self, SimilarityMode::Oracle(_))
    }
}

impl Similarity for SimilarityMode {
    fn features(&self, states: &[StateRef<'_>]) -> Vec<Vec<f64>> {
        match self {
            SimilarityMode::Learned(m) => m.features(states),
            SimilarityMode::Oracle(o) => o.features(states),
        }
    }

    fn score_many(&self, centers: &[&[f64]], query: &[f64]) -> Vec<f64> {
        match self {
            SimilarityMode::Learned(m) => m.score_many(centers, query),
            SimilarityMode::Oracle(o) => o.score_many(centers, query),
        }
    }

    fn version(&self) -> u64 {
        match self {
            SimilarityMode::Learned(m) => m.version(),
            SimilarityMode::Oracle(o) => o.version(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationReport {
    pub iteration: u64,
    /// Cumulative environment steps after this iteration.
    pub env_steps: u64,
    pub clusters: usize,
    pub new_clusters: usize,
    pub merges: usize,
    pub novel_flagged: usize,
    /// Mean BCE of the last training epoch; NaN when no training happened.
    pub sim_loss: f64,
    /// Mean RND predictor loss; NaN when the predictor was not trained.
    pub rnd_loss: f64,
    pub coverage_pct: f64,
    pub pretraining: bool,
}

/// Independent random streams, all derived from the run seed.
#[derive(Clone, Debug)]
struct Streams {
    policy: ChaCha8Rng,
    sampling: ChaCha8Rng,
    pairs: ChaCha8Rng,
    training: ChaCha8Rng,
    novelty: ChaCha8Rng,
}

/// Deterministic per-purpose generator: the seed selects the key, `stream` the ChaCha stream.
pub fn derived_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

impl Streams {
    fn new(seed: u64) -> Self {
        Streams {
            policy: derived_rng(seed, 1),
            sampling: derived_rng(seed, 2),
            pairs: derived_rng(seed, 3),
            training: derived_rng(seed, 4),
            novelty: derived_rng(seed, 5),
        }
    }
}

/// State of one exploration run.
pub struct Explorer<E: PersistentMdp> {
    config: RbConfig,
    env: E,
    policy: ExplorationPolicy,
    similarity: SimilarityMode,
    rnd: RndModule,
    buffer: NoveltyBuffer,
    graph: ClusterGraph,
    streams: Streams,
    root: (Observation, Snapshot, Option<UnitId>),
    iteration: u64,
    env_steps: u64,
    pretrained: bool,
    visited: BTreeSet<UnitId>,
    reachable: Option<BTreeSet<UnitId>>,
    last_exploration: Vec<(ClusterId, Trajectory)>,
    last_side: Vec<Trajectory>,
}

impl<E: PersistentMdp> Explorer<E> {
    /// A run with a freshly initialised similarity model (or the oracle when `oracle` is set).
    pub fn new(mut env: E, config: RbConfig, oracle: bool) -> Result<Self, ExploreError> {
        config.validate()?;
        let start = env.reset();
        let input_dim = start.observation.len();
        let mut init = derived_rng(config.seed, 0);
        let similarity = if oracle {
            SimilarityMode::Oracle(UnitOracle)
        } else {
            let sim_config = SimilarityConfig {
                input_dim,
                encoder_hidden: config.sim_encoder_hidden,
                embedding_dim: config.sim_embedding_dim,
                head_hidden: config.sim_head_hidden,
            };
            SimilarityMode::Learned(SimilarityModel::new(sim_config, &mut init))
        };
        let rnd = RndModule::new(config.rnd_config(input_dim), &mut init);
        let snapshot = env.save_snapshot();
        let unit = env.unit().ok();
        let root = (start.observation, snapshot, unit);
        let graph = ClusterGraph::new(root.0.clone(), root.1.clone(), root.2);
        Ok(Explorer {
            buffer: NoveltyBuffer::new(config.novelty_capacity),
            streams: Streams::new(config.seed),
            pretrained: oracle || config.pretrain_steps == 0,
            visited: unit.into_iter().collect(),
            policy: ExplorationPolicy::Uniform,
            reachable: None,
            last_exploration: Vec::new(),
            last_side: Vec::new(),
            iteration: 0,
            env_steps: 0,
            config,
            env,
            similarity,
            rnd,
            graph,
            root,
        })
    }

    /// Units that count toward coverage; without it coverage is reported as NaN.
    pub fn with_reachable(mut self, reachable: BTreeSet<UnitId>) -> Self {
        self.reachable = Some(reachable);
        self
    }

    pub fn with_policy(mut self, policy: ExplorationPolicy) -> Self {
        self.policy = policy;
        self
    }

    pub fn config(&self) -> &RbConfig {
        &self.config
    }

    pub fn graph(&self) -> &ClusterGraph {
        &self.graph
    }

    pub fn similarity(&self) -> &SimilarityMode {
        &self.similarity
    }

    pub fn rnd(&self) -> &RndModule {
        &self.rnd
    }

    pub fn novelty_buffer(&self) -> &NoveltyBuffer {
        &self.buffer
    }

    pub fn env(&self) -> &E {
        &self.env
    }

    pub fn iteration(&self) -> u64 {
        self.iteration
    }

    pub fn env_steps(&self) -> u64 {
        self.env_steps
    }

    pub fn visited_units(&self) -> &BTreeSet<UnitId> {
        &self.visited
    }

    /// Exploration rollouts (with their start clusters) of the latest iteration.
    pub fn last_exploration(&self) -> &[(ClusterId, Trajectory)] {
        &self.last_exploration
    }

    /// Side rollouts from novel states of the latest iteration.
    pub fn last_side_rollouts(&self) -> &[Trajectory] {
        &self.last_side
    }

    pub fn is_pretrained(&self) -> bool {
        self.pretrained
    }

    pub fn budget_exhausted(&self) -> bool {
        self.env_steps >= self.config.budget
    }

    pub fn coverage(&self) -> f64 {
        match &self.reachable {
            Some(full) => crate::persia::coverage(&self.visited, full),
            None => f64::NAN,
        }
    }

    /// Similarity threshold in force: ramps linearly from 0 to `theta_sim` over pretraining.
    pub fn theta(&self) -> f64 {
        if self.pretrained {
            return self.config.theta_sim;
        }
        let frac = self.env_steps as f64 / self.config.pretrain_steps as f64;
        (self.config.theta_sim * frac).clamp(0.0, self.config.theta_sim)
    }

    fn step_limit(&self) -> u64 {
        if self.pretrained {
            self.config.budget
        } else {
            self.config.pretrain_steps.min(self.config.budget)
        }
    }

    /// Run pretraining iterations until the pretraining budget is spent, then
    /// reset the graph to the root. A no-op once pretrained.
    pub fn pretrain(
        &mut self,
        sink: &mut dyn FnMut(&IterationReport) -> std::io::Result<()>,
    ) -> Result<Vec<IterationReport>, ExploreError> {
        let mut reports = Vec::new();
        while !self.pretrained {
            if self.env_steps >= self.step_limit() {
                self.finish_pretraining();
                break;
            }
            let report = self.run_iteration()?;
            sink(&report)?;
            reports.push(report);
        }
        Ok(reports)
    }

    fn finish_pretraining(&mut self) {
        let (obs, snap, unit) = self.root.clone();
        self.graph = ClusterGraph::new(obs, snap, unit);
        self.pretrained = true;
    }

    /// Pretrain, then iterate until the budget is exhausted. At least one
    /// iteration always runs.
    pub fn run(
        &mut self,
        sink: &mut dyn FnMut(&IterationReport) -> std::io::Result<()>,
    ) -> Result<Vec<IterationReport>, ExploreError> {
        let mut reports = self.pretrain(sink)?;
        loop {
            let report = self.run_iteration()?;
            sink(&report)?;
            reports.push(report);
            if self.budget_exhausted() {
                break;
            }
        }
        Ok(reports)
    }

    fn remaining(&self) -> usize {
        self.step_limit().saturating_sub(self.env_steps) as usize
    }

    fn roll(&mut self, start: &Snapshot) -> Result<Option<Trajectory>, ExploreError> {
        let steps = self.config.max_rollout_steps.min(self.remaining());
        if steps == 0 {
            return Ok(None);
        }
        let t = rollout(&mut self.env, start, &self.policy, steps, &mut self.streams.policy)?;
        self.env_steps += t.env_steps;
        self.visited.extend(t.steps.iter().filter_map(|s| s.unit));
        Ok(Some(t))
    }

    /// One iteration: (1) sample clusters and roll out from them; (2) flag novel
    /// states, run side rollouts from buffered ones and build training pairs;
    /// (3) train the similarity model; (4) add the exploration trajectories to
    /// the graph and periodically merge; (5) train RND.
    ///
    /// Models and graph only change once every fallible step has succeeded.
    pub fn run_iteration(&mut self) -> Result<IterationReport, ExploreError> {
        let iteration = self.iteration + 1;
        let theta = self.theta();
        let pretraining = !self.pretrained;
        let learned = !self.similarity.is_oracle();

        // (1)
        let starts = self
            .graph
            .sample_clusters(self.config.clusters_per_iteration, &mut self.streams.sampling);
        let mut explored: Vec<(ClusterId, Trajectory)> = Vec::with_capacity(starts.len());
        for id in starts {
            let snapshot = self.graph.cluster(id).expect("sampled cluster").snapshot.clone();
            match self.roll(&snapshot)? {
                Some(t) => explored.push((id, t)),
                None => break,
            }
        }
        let observations: Vec<&Observation> = explored
            .iter()
            .flat_map(|(_, t)| t.steps.iter().map(|s| &s.observation))
            .collect();

        // (2)
        let mut novel_flagged = 0;
        let mut data = PairDataset::default();
        let mut side = Vec::new();
        if learned {
            let flags = self.rnd.novel_flags(&observations, self.config.beta_intrinsic);
            for (step, _) in explored
                .iter()
                .flat_map(|(_, t)| &t.steps)
                .zip(flags)
                .filter(|(_, f)| *f)
            {
                novel_flagged += 1;
                self.buffer.push(NovelState {
                    observation: step.observation.clone(),
                    snapshot: step.snapshot.clone(),
                    unit: step.unit,
                });
            }
            for state in self.buffer.draw(self.config.novel_rollouts, &mut self.streams.novelty) {
                match self.roll(&state.snapshot)? {
                    Some(t) => side.push(t),
                    None => break,
                }
            }
            let (n, big_n) = (self.config.n, self.config.big_n);
            let count = self.config.pairs_per_trajectory;
            for t in explored.iter().map(|(_, t)| t).chain(&side) {
                let obs = t.observations();
                let pairs = generate_pairs(&obs, n, big_n, count, &mut self.streams.pairs)
                    .map_err(|source| ExploreError::Similarity { iteration, source })?;
                data.extend(pairs);
            }
            if !self.config.no_prefix_negatives {
                for (id, t) in &explored {
                    let prefix = self.graph.full_prefix(*id);
                    data.extend(generate_prefix_negatives(
                        &t.observations(),
                        &prefix,
                        big_n,
                        self.config.prefix_negatives_per_trajectory,
                        &mut self.streams.pairs,
                    ));
                }
            }
        }

        // (3)
        let mut sim_loss = f64::NAN;
        let mut trained = None;
        if let SimilarityMode::Learned(model) = &self.similarity {
            if data.positives() > 0 && data.negatives() > 0 {
                let mut next = model.clone();
                let history = next
                    .train(&data, &self.config.train_options(), &mut self.streams.training)
                    .map_err(|source| ExploreError::Similarity { iteration, source })?;
                sim_loss = history.last().copied().unwrap_or(f64::NAN);
                trained = Some(next);
            }
        }

        // (5) is computed ahead of (4) on a copy so that a failure leaves
        // everything untouched; it does not depend on the graph.
        let mut rnd_loss = f64::NAN;
        let mut rnd_next = None;
        if learned && !observations.is_empty() {
            let mut next = self.rnd.clone();
            if pretraining && !self.config.pretrain_rnd_training {
                next.update_normalizers(&observations);
            } else {
                rnd_loss = next
                    .update(&observations)
                    .map_err(|source| ExploreError::Rnd { iteration, source })?;
            }
            rnd_next = Some(next);
        }

        // Commit.
        if let Some(model) = trained {
            self.similarity = SimilarityMode::Learned(model);
        }
        if let Some(rnd) = rnd_next {
            self.rnd = rnd;
        }
        // (4)
        let before = self.graph.next_id();
        for (id, t) in &explored {
            self.graph.insert_trajectory(&self.similarity, t, *id, theta, iteration);
        }
        let new_clusters = (self.graph.next_id() - before) as usize;
        let mut merges = 0;
        if !self.config.no_merge && iteration.is_multiple_of(self.config.merge_every) {
            merges = self.graph.merge_pass(&self.similarity, self.config.theta_merge);
        }

        self.iteration = iteration;
        self.last_exploration = explored;
        self.last_side = side;
        if pretraining && self.env_steps >= self.step_limit() {
            self.finish_pretraining();
        }
        Ok(IterationReport {
            iteration,
            env_steps: self.env_steps,
            clusters: self.graph.len(),
            new_clusters,
            merges,
            novel_flagged,
            sim_loss,
            rnd_loss,
            coverage_pct: self.coverage(),
            pretraining,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::persia::{bundled, reachable_units, LevelSpec, PersiaLite};
    use std::sync::Arc;

    fn env(text: &str) -> PersiaLite {
        PersiaLite::new(Arc::new(LevelSpec::parse(text).unwrap())).unwrap()
    }

    fn small() -> RbConfig {
        RbConfig {
            clusters_per_iteration: 4,
            novel_rollouts: 2,
            max_rollout_steps: 40,
            pretrain_steps: 300,
            sim_encoder_hidden: 16,
            sim_embedding_dim: 16,
            sim_head_hidden: 16,
            rnd_hidden: 16,
            rnd_output: 8,
            rnd_warmup: 50,
            budget: 1_000,
            ..RbConfig::default()
        }
    }

    fn no_sink() -> impl FnMut(&IterationReport) -> std::io::Result<()> {
        |_| Ok(())
    }

    #[test]
    fn uniform_policy_is_uniform() {
        for a in Action::all() {
            assert_eq!(ExplorationPolicy::Uniform.probability(a), 1.0 / 7.0);
        }
        let rigged = ExplorationPolicy::Constant(Action::LEFT);
        assert_eq!(rigged.probability(Action::LEFT), 1.0);
        assert_eq!(rigged.probability(Action::RIGHT), 0.0);
    }

    #[test]
    fn single_step_rollout() {
        let mut e = env(bundled::L1);
        let start = e.save_snapshot();
        let t = rollout(&mut e, &start, &ExplorationPolicy::Uniform, 1, &mut derived_rng(1, 1)).unwrap();
        assert_eq!((t.len(), t.env_steps, t.died), (1, 1, false));
    }

    #[test]
    fn rollouts_replay_under_a_fixed_seed() {
        let mut e = env(bundled::L1);
        let start = e.save_snapshot();
        let p = ExplorationPolicy::Uniform;
        let a = rollout(&mut e, &start, &p, 50, &mut derived_rng(3, 1)).unwrap();
        let b = rollout(&mut e, &start, &p, 50, &mut derived_rng(3, 1)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn death_ends_rollout_and_is_excluded() {
        let mut e = env("#####\n#T.I#\n#####\n");
        let start = e.save_snapshot();
        let p = ExplorationPolicy::Constant(Action::LEFT);
        let t = rollout(&mut e, &start, &p, 10, &mut derived_rng(0, 1)).unwrap();
        assert!(t.died);
        assert_eq!(t.len(), 1);
        assert_eq!(t.env_steps, 2);
        assert_eq!(t.steps[0].unit, e.spec().unit_of(crate::persia::Pos::new(1, 2)));
    }

    #[test]
    fn config_validation() {
        assert!(RbConfig::default().validate().is_ok());
        assert!(RbConfig::full_scale().validate().is_ok());
        let bad = [
            RbConfig { theta_sim: 1.0, ..RbConfig::default() },
            RbConfig { theta_merge: 0.0, ..RbConfig::default() },
            RbConfig { n: 25, ..RbConfig::default() },
            RbConfig { clusters_per_iteration: 0, ..RbConfig::default() },
            RbConfig { budget: 0, ..RbConfig::default() },
        ];
        for c in bad {
            assert!(matches!(c.validate(), Err(ExploreError::Config(_))), "{c:?}");
        }
    }

    #[test]
    fn theta_ramps_during_pretraining() {
        let mut x = Explorer::new(env(bundled::L1), RbConfig::default(), false).unwrap();
        assert_eq!(x.theta(), 0.0);
        x.env_steps = 25_000;
        assert!((x.theta() - 0.25).abs() < 1e-12);
        x.env_steps = 80_000;
        assert_eq!(x.theta(), 0.5);
    }

    #[test]
    fn zero_pretraining_is_a_no_op() {
        let config = RbConfig { pretrain_steps: 0, ..small() };
        let mut x = Explorer::new(env(bundled::L1), config, false).unwrap();
        assert!(x.is_pretrained());
        assert!(x.pretrain(&mut no_sink()).unwrap().is_empty());
        assert_eq!(x.theta(), 0.5);
    }

    #[test]
    fn pretraining_resets_graph_and_changes_the_model() {
        let mut x = Explorer::new(env(bundled::L1), small(), false).unwrap();
        let SimilarityMode::Learned(before) = x.similarity().clone() else { unreachable!() };
        let reports = x.pretrain(&mut no_sink()).unwrap();
        assert!(!reports.is_empty());
        assert!(reports.iter().all(|r| r.pretraining));
        assert!(x.is_pretrained());
        assert_eq!(x.graph().len(), 1);
        assert_eq!(x.env_steps(), 300);
        let SimilarityMode::Learned(after) = x.similarity() else { unreachable!() };
        use crate::nn::ParamSet;
        assert_ne!(before.flat_params(), after.flat_params());
    }

    #[test]
    fn budget_smaller_than_a_rollout_still_runs_an_iteration() {
        let config = RbConfig { pretrain_steps: 0, budget: 5, ..small() };
        let mut x = Explorer::new(env(bundled::L1), config, false).unwrap();
        let reports = x.run(&mut no_sink()).unwrap();
        assert_eq!(reports.len(), 1);
        assert_eq!(reports[0].env_steps, 5);
    }

    #[test]
    fn steps_match_the_environment_counter() {
        let mut x = Explorer::new(env(bundled::L1), small(), false).unwrap();
        let reports = x.run(&mut no_sink()).unwrap();
        assert_eq!(x.env_steps(), x.env().total_steps());
        assert_eq!(reports.last().unwrap().env_steps, 1_000);
        assert!(reports.windows(2).all(|w| w[0].env_steps <= w[1].env_steps));
    }

    #[test]
    fn merge_runs_on_schedule() {
        let config = RbConfig { pretrain_steps: 0, merge_every: 3, budget: 100_000, ..small() };
        let mut x = Explorer::new(env(bundled::L1), config, true).unwrap();
        for _ in 0..6 {
            x.run_iteration().unwrap();
        }
        // The oracle never finds anything to merge, but the pass ran without error.
        assert!(x.graph().check_invariants().is_ok());
    }

    #[test]
    fn same_seed_same_reports() {
        let go = || {
            let mut x = Explorer::new(env(bundled::L1), small(), false).unwrap();
            x.run(&mut no_sink()).unwrap()
        };
        let (a, b) = (go(), go());
        assert_eq!(format!("{a:?}"), format!("{b:?}"));
    }

    #[test]
    fn oracle_clusters_match_visited_units() {
        let e = env(bundled::L1);
        let full = reachable_units(e.spec()).unwrap();
        let config = RbConfig { budget: 3_000, ..small() };
        let mut x = Explorer::new(e, config, true).unwrap().with_reachable(full);
        let reports = x.run(&mut no_sink()).unwrap();
        assert_eq!(x.graph().len(), x.visited_units().len());
        assert!(reports.iter().all(|r| r.merges == 0 && r.sim_loss.is_nan()));
        assert!(x.coverage() > 0.0);
    }
}
