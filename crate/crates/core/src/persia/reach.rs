use std::collections::{BTreeSet, HashSet, VecDeque};

use thiserror::Error;

use crate::persia::env::{transition, EnvState};
use crate::persia::level::LevelSpec;
use crate::pmdp::{Action, UnitId};

pub const DEFAULT_STATE_CAP: usize = 10_000_000;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
#[error("reachability search exceeded {cap} states")]
pub struct StateCapExceeded {
    pub cap: usize,
}

/// Units visited in any state reachable from the initial state without dying.
pub fn reachable_units(spec: &LevelSpec) -> Result<BTreeSet<UnitId>, StateCapExceeded> {
    reachable_units_capped(spec, DEFAULT_STATE_CAP)
}

pub fn reachable_units_capped(
    spec: &LevelSpec,
    cap: usize,
) -> Result<BTreeSet<UnitId>, StateCapExceeded> {
    // Step counters are irrelevant to reachability.
    let key = |s: &EnvState| EnvState { steps: 0, ..*s };
    let start = key(&EnvState::initial(spec));
    let mut seen = HashSet::from([start]);
    let mut queue = VecDeque::from([start]);
    let mut units = BTreeSet::new();
    while let Some(state) = queue.pop_front() {
        units.insert(spec.unit_of(state.pos).expect("walkable"));
        for action in Action::all() {
            let next = key(&transition(spec, &state, action));
            if next.alive && seen.insert(next) {
                if seen.len() > cap {
                    return Err(StateCapExceeded { cap });
                }
                queue.push_back(next);
            }
        }
    }
    Ok(units)
}

/// Percentage of the maximally visitable units that were visited.
pub fn coverage(visited: &BTreeSet<UnitId>, full: &BTreeSet<UnitId>) -> f64 {
    if full.is_empty() {
        return 0.0;
    }
    100.0 * visited.intersection(full).count() as f64 / full.len() as f64
}
