//! Graph of clusters over visited states.
//!
//! A cluster is a center observation plus the snapshot that reproduces it.
//! Arcs record observed transitions between clusters; every non-root cluster
//! also keeps a parent arc carrying the observations that led to it, so a path
//! back to the initial state can be rebuilt for any cluster.

use std::collections::{BTreeMap, BTreeSet};

use rand::distributions::WeightedIndex;
use rand::prelude::Distribution;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::pmdp::{Observation, Snapshot, UnitId};
use crate::similarity::{Similarity, StateRef};
use crate::trajectory::Trajectory;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ClusterId(pub u32);

#[derive(Clone, Debug, PartialEq)]
pub struct Cluster {
    pub id: ClusterId,
    pub center: Observation,
    pub snapshot: Snapshot,
    /// Ground truth of the center, for metrics and oracles.
    pub unit: Option<UnitId>,
    pub visit_count: u64,
    pub created_at: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParentArc {
    pub parent: ClusterId,
    /// Observations from where the trajectory entered the parent through the
    /// child's center, inclusive.
    pub prefix: Vec<Observation>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Assignment {
    Existing(ClusterId),
    New,
}

#[derive(Clone, Debug, Default)]
struct FeatureCache {
    version: Option<u64>,
    features: BTreeMap<ClusterId, Vec<f64>>,
}

#[derive(Clone, Debug)]
pub struct ClusterGraph {
    clusters: BTreeMap<ClusterId, Cluster>,
    arcs: BTreeMap<(ClusterId, ClusterId), u64>,
    out_adj: BTreeMap<ClusterId, BTreeSet<ClusterId>>,
    in_adj: BTreeMap<ClusterId, BTreeSet<ClusterId>>,
    parents: BTreeMap<ClusterId, ParentArc>,
    root: ClusterId,
    next_id: u32,
    cache: FeatureCache,
}

impl PartialEq for ClusterGraph {
    fn eq(&self, other: &Self) -> bool {
        self.clusters == other.clusters
            && self.arcs == other.arcs
            && self.parents == other.parents
            && self.root == other.root
            && self.next_id == other.next_id
    }
}

impl ClusterGraph {
    pub fn new(observation: Observation, snapshot: Snapshot, unit: Option<UnitId>) -> Self {
        let root = ClusterId(0);
        let mut graph = ClusterGraph {
            clusters: BTreeMap::new(),
            arcs: BTreeMap::new(),
            out_adj: BTreeMap::new(),
            in_adj: BTreeMap::new(),
            parents: BTreeMap::new(),
            root,
            next_id: 1,
            cache: FeatureCache::default(),
        };
        graph.clusters.insert(
            root,
            Cluster {
                id: root,
                center: observation,
                snapshot,
                unit,
                visit_count: 0,
                created_at: 0,
            },
        );
        graph
    }

    /// Rebuild from parts, e.g. after loading a dump. Adjacency is derived from `arcs`.
    pub fn from_parts(
        clusters: Vec<Cluster>,
        arcs: Vec<((ClusterId, ClusterId), u64)>,
        parents: Vec<(ClusterId, ParentArc)>,
        root: ClusterId,
        next_id: u32,
    ) -> Self {
        let mut graph = ClusterGraph {
            clusters: clusters.into_iter().map(|c| (c.id, c)).collect(),
            arcs: BTreeMap::new(),
            out_adj: BTreeMap::new(),
            in_adj: BTreeMap::new(),
            parents: parents.into_iter().collect(),
            root,
            next_id,
            cache: FeatureCache::default(),
        };
        for ((from, to), count) in arcs {
            graph.add_arc(from, to, count);
        }
        graph
    }

    pub fn root(&self) -> ClusterId {
        self.root
    }

    pub fn len(&self) -> usize {
        self.clusters.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clusters.is_empty()
    }

    pub fn next_id(&self) -> u32 {
        self.next_id
    }

    pub fn cluster(&self, id: ClusterId) -> Option<&Cluster> {
        self.clusters.get(&id)
    }

    pub fn clusters(&self) -> impl Iterator<Item = &Cluster> {
        self.clusters.values()
    }

    pub fn arcs(&self) -> &BTreeMap<(ClusterId, ClusterId), u64> {
        &self.arcs
    }

    pub fn parent_arc(&self, id: ClusterId) -> Option<&ParentArc> {
        self.parents.get(&id)
    }

    pub fn parent_arcs(&self) -> &BTreeMap<ClusterId, ParentArc> {
        &self.parents
    }

    pub fn total_visits(&self) -> u64 {
        self.clusters.values().map(|c| c.visit_count).sum()
    }

    /// Out- and in-neighbors of `id`.
    pub fn neighbors(&self, id: ClusterId) -> BTreeSet<ClusterId> {
        let mut out = BTreeSet::new();
        if let Some(s) = self.out_adj.get(&id) {
            out.extend(s);
        }
        if let Some(s) = self.in_adj.get(&id) {
            out.extend(s);
        }
        out
    }

    fn add_arc(&mut self, from: ClusterId, to: ClusterId, count: u64) {
        debug_assert_ne!(from, to, "self-arc");
        *self.arcs.entry((from, to)).or_insert(0) += count;
        self.out_adj.entry(from).or_default().insert(to);
        self.in_adj.entry(to).or_default().insert(from);
    }

    fn refresh_cache<S: Similarity + ?Sized>(&mut self, sim: &S) {
        if self.cache.version == Some(sim.version())
            && self.cache.features.len() == self.clusters.len()
        {
            return;
        }
        let ids: Vec<ClusterId> = self.clusters.keys().copied().collect();
        let states: Vec<StateRef<'_>> = self
            .clusters
            .values()
            .map(|c| StateRef {
                observation: &c.center,
                unit: c.unit,
            })
            .collect();
        let features = sim.features(&states);
        self.cache.features = ids.into_iter().zip(features).collect();
        self.cache.version = Some(sim.version());
    }

    fn best_over<'a, S, I>(&self, sim: &S, candidates: I, query: &[f64], theta: f64) -> Option<ClusterId>
    where
        S: Similarity + ?Sized,
        I: IntoIterator<Item = &'a ClusterId>,
    {
        let ids: Vec<ClusterId> = candidates.into_iter().copied().collect();
        if ids.is_empty() {
            return None;
        }
        let centers: Vec<&[f64]> = ids
            .iter()
            .map(|id| self.cache.features[id].as_slice())
            .collect();
        let scores = sim.score_many(&centers, query);
        let mut best: Option<(ClusterId, f64)> = None;
        // Candidates are in ascending id order, so strict comparison keeps the smallest id on ties.
        for (&id, &s) in ids.iter().zip(&scores) {
            if s > theta && best.is_none_or(|(_, b)| s > b) {
                best = Some((id, s));
            }
        }
        best.map(|(id, _)| id)
    }

    /// Find the cluster a state belongs to: first among the previous cluster and
    /// its neighbors, then among all clusters. `query` are the state's features.
    pub fn assign<S: Similarity + ?Sized>(
        &mut self,
        sim: &S,
        query: &[f64],
        previous: Option<ClusterId>,
        theta: f64,
    ) -> Assignment {
        self.refresh_cache(sim);
        self.assign_cached(sim, query, previous, theta)
    }

    fn assign_cached<S: Similarity + ?Sized>(
        &self,
        sim: &S,
        query: &[f64],
        previous: Option<ClusterId>,
        theta: f64,
    ) -> Assignment {
        if let Some(prev) = previous.filter(|p| self.clusters.contains_key(p)) {
            let mut local = self.neighbors(prev);
            local.insert(prev);
            if let Some(id) = self.best_over(sim, &local, query, theta) {
                return Assignment::Existing(id);
            }
        }
        match self.best_over(sim, self.clusters.keys(), query, theta) {
            Some(id) => Assignment::Existing(id),
            None => Assignment::New,
        }
    }

    /// `assign` for a raw observation.
    pub fn assign_observation<S: Similarity + ?Sized>(
        &mut self,
        sim: &S,
        observation: &Observation,
        unit: Option<UnitId>,
        previous: Option<ClusterId>,
        theta: f64,
    ) -> Assignment {
        let f = sim.features(&[StateRef { observation, unit }]);
        self.assign(sim, &f[0], previous, theta)
    }

    fn create_cluster(
        &mut self,
        center: Observation,
        snapshot: Snapshot,
        unit: Option<UnitId>,
        created_at: u64,
        parent: ParentArc,
    ) -> ClusterId {
        let id = ClusterId(self.next_id);
        self.next_id += 1;
        self.clusters.insert(
            id,
            Cluster {
                id,
                center,
                snapshot,
                unit,
                visit_count: 0,
                created_at,
            },
        );
        self.parents.insert(id, parent);
        id
    }

    /// Add a trajectory that was rolled out from `start`'s snapshot.
    ///
    /// Returns the cluster of every step. New clusters get a parent arc to the
    /// cluster of the preceding step, with the observations from where the
    /// trajectory entered that cluster (index 0 for `start`) through the new center.
    pub fn insert_trajectory<S: Similarity + ?Sized>(
        &mut self,
        sim: &S,
        trajectory: &Trajectory,
        start: ClusterId,
        theta: f64,
        iteration: u64,
    ) -> Vec<ClusterId> {
        assert!(self.clusters.contains_key(&start), "start cluster {start:?} missing");
        if trajectory.is_empty() {
            return Vec::new();
        }
        self.refresh_cache(sim);
        let states: Vec<StateRef<'_>> = trajectory
            .steps
            .iter()
            .map(|s| StateRef {
                observation: &s.observation,
                unit: s.unit,
            })
            .collect();
        let features = sim.features(&states);

        self.clusters.get_mut(&start).unwrap().visit_count += 1;
        let mut touched = BTreeSet::new();
        let mut assigned = Vec::with_capacity(trajectory.len());
        let mut prev = start;
        let mut run_start = 0;
        for (i, (step, f)) in trajectory.steps.iter().zip(features).enumerate() {
            let id = match self.assign_cached(sim, &f, Some(prev), theta) {
                Assignment::Existing(id) => id,
                Assignment::New => {
                    let prefix = trajectory.steps[run_start..=i]
                        .iter()
                        .map(|s| s.observation.clone())
                        .collect();
                    let id = self.create_cluster(
                        step.observation.clone(),
                        step.snapshot.clone(),
                        step.unit,
                        iteration,
                        ParentArc {
                            parent: prev,
                            prefix,
                        },
                    );
                    self.cache.features.insert(id, f);
                    id
                }
            };
            if id != prev {
                self.add_arc(prev, id, 1);
                prev = id;
                run_start = i;
            }
            touched.insert(id);
            assigned.push(id);
        }
        for id in touched {
            self.clusters.get_mut(&id).unwrap().visit_count += 1;
        }
        assigned
    }

    /// Concatenated parent-arc prefixes from the root down to `id`.
    pub fn full_prefix(&self, id: ClusterId) -> Vec<Observation> {
        let mut chain = Vec::new();
        let mut cur = id;
        while let Some(arc) = self.parents.get(&cur) {
            chain.push(&arc.prefix);
            cur = arc.parent;
        }
        chain.into_iter().rev().flatten().cloned().collect()
    }

    /// `count` draws with replacement, `P(v) ∝ 1 / (1 + visits(v))`.
    pub fn sample_clusters<R: Rng + ?Sized>(&self, count: usize, rng: &mut R) -> Vec<ClusterId> {
        let ids: Vec<ClusterId> = self.clusters.keys().copied().collect();
        let weights = self
            .clusters
            .values()
            .map(|c| 1.0 / (1.0 + c.visit_count as f64));
        let dist = WeightedIndex::new(weights).expect("graph has at least the root");
        (0..count).map(|_| ids[dist.sample(rng)]).collect()
    }

    /// One pass over all cluster pairs, oldest first. A pair scoring above
    /// `theta` (max over both argument orders) is fused into the older cluster;
    /// both then sit out the rest of the pass. Returns the number of merges.
    pub fn merge_pass<S: Similarity + ?Sized>(&mut self, sim: &S, theta: f64) -> usize {
        self.refresh_cache(sim);
        let mut order: Vec<(u64, ClusterId)> =
            self.clusters.values().map(|c| (c.created_at, c.id)).collect();
        order.sort_unstable();
        let mut done = BTreeSet::new();
        let mut pairs = Vec::new();
        for (i, &(_, a)) in order.iter().enumerate() {
            if done.contains(&a) {
                continue;
            }
            for &(_, b) in &order[i + 1..] {
                if done.contains(&b) {
                    continue;
                }
                let (fa, fb) = (&self.cache.features[&a], &self.cache.features[&b]);
                let s = sim.score(fa, fb).max(sim.score(fb, fa));
                if s > theta {
                    done.insert(a);
                    done.insert(b);
                    pairs.push((a, b));
                    break;
                }
            }
        }
        for &(survivor, absorbed) in &pairs {
            self.absorb(survivor, absorbed);
        }
        pairs.len()
    }

    /// Fuse `absorbed` into `survivor`, keeping the survivor's center, snapshot and parent.
    pub fn absorb(&mut self, survivor: ClusterId, absorbed: ClusterId) {
        assert_ne!(survivor, absorbed);
        let gone = self.clusters.remove(&absorbed).expect("absorbed cluster exists");
        self.clusters.get_mut(&survivor).expect("survivor exists").visit_count += gone.visit_count;
        self.cache.features.remove(&absorbed);

        let touching: Vec<((ClusterId, ClusterId), u64)> = self
            .arcs
            .iter()
            .filter(|((f, t), _)| *f == absorbed || *t == absorbed)
            .map(|(&k, &v)| (k, v))
            .collect();
        for ((f, t), _) in &touching {
            self.arcs.remove(&(*f, *t));
            if let Some(s) = self.out_adj.get_mut(f) {
                s.remove(t);
            }
            if let Some(s) = self.in_adj.get_mut(t) {
                s.remove(f);
            }
        }
        self.out_adj.remove(&absorbed);
        self.in_adj.remove(&absorbed);
        let remap = |x: ClusterId| if x == absorbed { survivor } else { x };
        for ((f, t), count) in touching {
            let (f, t) = (remap(f), remap(t));
            if f != t {
                self.add_arc(f, t, count);
            }
        }

        self.parents.remove(&absorbed);
        for arc in self.parents.values_mut() {
            if arc.parent == absorbed {
                arc.parent = survivor;
            }
        }
    }

    /// Structural invariants: no self-arcs, arcs between live clusters, and a
    /// parent forest in which every cluster reaches the root.
    pub fn check_invariants(&self) -> Result<(), String> {
        if !self.clusters.contains_key(&self.root) {
            return Err("root missing".into());
        }
        for &(f, t) in self.arcs.keys() {
            if f == t {
                return Err(format!("self-arc on {f:?}"));
            }
            if !self.clusters.contains_key(&f) || !self.clusters.contains_key(&t) {
                return Err(format!("arc {f:?}->{t:?} references a missing cluster"));
            }
        }
        if self.parents.contains_key(&self.root) {
            return Err("root has a parent".into());
        }
        for &id in self.clusters.keys() {
            if id == self.root {
                continue;
            }
            let mut cur = id;
            let mut hops = 0;
            while cur != self.root {
                let arc = self
                    .parents
                    .get(&cur)
                    .ok_or_else(|| format!("{cur:?} has no parent arc"))?;
                if !self.clusters.contains_key(&arc.parent) {
                    return Err(format!("{cur:?} points at missing parent {:?}", arc.parent));
                }
                cur = arc.parent;
                hops += 1;
                if hops > self.clusters.len() {
                    return Err(format!("parent cycle through {id:?}"));
                }
            }
        }
        for child in self.parents.keys() {
            if !self.clusters.contains_key(child) {
                return Err(format!("parent arc for missing cluster {child:?}"));
            }
        }
        Ok(())
    }
}
