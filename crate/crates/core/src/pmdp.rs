//! Persistent MDP interface: step dynamics plus exact save/restore of simulator state.
//!
//! Rewards are identically zero in this setting, so a step only reports the next
//! observation and whether the episode terminated.

use std::fmt;
use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Number of discrete actions (no-op, left, right, up, down, A, B).
pub const NUM_ACTIONS: usize = 7;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Action(u8);

impl Action {
    pub const NOOP: Action = Action(0);
    pub const LEFT: Action = Action(1);
    pub const RIGHT: Action = Action(2);
    pub const UP: Action = Action(3);
    pub const DOWN: Action = Action(4);
    pub const A: Action = Action(5);
    pub const B: Action = Action(6);

    pub fn new(index: usize) -> Result<Self, EnvError> {
        if index < NUM_ACTIONS {
            Ok(Action(index as u8))
        } else {
            Err(EnvError::InvalidAction(index))
        }
    }

    pub fn index(self) -> usize {
        self.0 as usize
    }

    pub fn all() -> impl Iterator<Item = Action> {
        (0..NUM_ACTIONS as u8).map(Action)
    }

    /// Uniform draw over the full action set.
    pub fn sample<R: Rng + ?Sized>(rng: &mut R) -> Self {
        Action(rng.gen_range(0..NUM_ACTIONS as u8))
    }
}

/// Ground-truth coverage unit (a walkable tile). Never fed to learned models.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct UnitId(pub u32);

/// Fixed-size grid of intensities in `[0, 1]`, row-major.
///
/// Values are shared behind an `Arc` so trajectories, prefixes and cluster
/// centers can hold the same frame without copying it.
#[derive(Clone, PartialEq)]
pub struct Observation {
    height: usize,
    width: usize,
    values: Arc<[f32]>,
}

impl Observation {
    pub fn new(height: usize, width: usize, values: Vec<f32>) -> Result<Self, EnvError> {
        if values.len() != height * width {
            return Err(EnvError::ShapeMismatch {
                expected: height * width,
                actual: values.len(),
            });
        }
        if let Some(v) = values.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(EnvError::ObservationRange(*v));
        }
        Ok(Observation {
            height,
            width,
            values: values.into(),
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn get(&self, row: usize, col: usize) -> f32 {
        self.values[row * self.width + col]
    }

    /// Exact bit pattern, usable as a hash key.
    pub fn to_bits(&self) -> Vec<u32> {
        self.values.iter().map(|v| v.to_bits()).collect()
    }
}

impl fmt::Debug for Observation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Observation({}x{})", self.height, self.width)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepResult {
    pub observation: Observation,
    /// Death of the agent. Further steps are rejected until reset or restore.
    pub terminated: bool,
    /// 1 for `step`; 0 for `reset` and `restore_snapshot`, which do not advance the simulator.
    pub env_steps_consumed: u64,
}

/// Opaque, versioned copy of the complete environment state.
#[derive(Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Snapshot {
    version: u32,
    bytes: Arc<[u8]>,
}

impl Snapshot {
    pub fn new(version: u32, bytes: Vec<u8>) -> Self {
        Snapshot {
            version,
            bytes: bytes.into(),
        }
    }

    pub fn version(&self) -> u32 {
        self.version
    }

    pub fn bytes(&self) -> &[u8] {
        &self.bytes
    }
}

impl fmt::Debug for Snapshot {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Snapshot(v{}, {} bytes)", self.version, self.bytes.len())
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EnvError {
    #[error("action index {0} out of range 0..{NUM_ACTIONS}")]
    InvalidAction(usize),
    #[error("step called on a terminated episode; reset or restore first")]
    Terminated,
    #[error("agent is dead; unit lookup is undefined")]
    Dead,
    #[error("snapshot version {found} does not match environment version {expected}")]
    SnapshotVersion { expected: u32, found: u32 },
    #[error("corrupt snapshot: {0}")]
    CorruptSnapshot(String),
    #[error("observation has {actual} values, expected {expected}")]
    ShapeMismatch { expected: usize, actual: usize },
    #[error("observation value {0} outside [0, 1]")]
    ObservationRange(f32),
}

/// An environment whose full state can be saved and restored exactly.
pub trait PersistentMdp {
    /// Return to the initial state.
    fn reset(&mut self) -> StepResult;

    fn step(&mut self, action: Action) -> Result<StepResult, EnvError>;

    /// Capture the complete state. Has no observable effect on the environment.
    fn save_snapshot(&self) -> Snapshot;

    fn restore_snapshot(&mut self, snapshot: &Snapshot) -> Result<StepResult, EnvError>;

    fn observe(&self) -> Observation;

    /// Privileged ground-truth unit under the agent, for metrics and test oracles only.
    fn unit(&self) -> Result<UnitId, EnvError>;

    /// Lifetime count of `step` calls on this instance; not part of the snapshot.
    fn total_steps(&self) -> u64;
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn action_set_has_seven_members() {
        assert_eq!(Action::all().count(), 7);
        assert!(Action::new(6).is_ok());
        assert_eq!(Action::new(7), Err(EnvError::InvalidAction(7)));
    }

    #[test]
    fn observation_validates_shape_and_range() {
        assert!(Observation::new(2, 2, vec![0.0; 4]).is_ok());
        assert!(matches!(
            Observation::new(2, 2, vec![0.0; 3]),
            Err(EnvError::ShapeMismatch { .. })
        ));
        assert!(matches!(
            Observation::new(1, 1, vec![1.5]),
            Err(EnvError::ObservationRange(_))
        ));
    }
}
