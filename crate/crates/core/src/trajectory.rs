use crate::pmdp::{Observation, Snapshot, UnitId};

#[derive(Clone, Debug, PartialEq)]
pub struct TrajectoryStep {
    pub observation: Observation,
    pub snapshot: Snapshot,
    /// Ground-truth unit for metrics and oracles.
    pub unit: Option<UnitId>,
}

/// States reached by one rollout, excluding the restored start state.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Trajectory {
    pub steps: Vec<TrajectoryStep>,
    /// The rollout ended in death; the fatal state is not in `steps`.
    pub died: bool,
    /// Environment steps taken, including a fatal one.
    pub env_steps: u64,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn observations(&self) -> Vec<Observation> {
        self.steps.iter().map(|s| s.observation.clone()).collect()
    }
}
