#![allow(dead_code)]

use std::collections::{BTreeSet, HashSet, VecDeque};
use std::sync::Arc;

use rand::Rng;
use rbx_core::persia::{bundled, transition, EnvState, LevelSpec, PersiaLite};
use rbx_core::pmdp::{Action, Observation};

pub fn level(text: &str) -> Arc<LevelSpec> {
    Arc::new(LevelSpec::parse(text).expect("level parses"))
}

pub fn l1() -> PersiaLite {
    PersiaLite::new(level(bundled::L1)).unwrap()
}

/// A small level exercising every dynamic tile: plate, door, key, locked door and trap.
pub const GADGETS: &str = "\
#########
#I..P#..#
#....D..#
#T...#.K#
##L######
#...#####
#########
link: (1,4)->(2,5)
";

/// Every distinct dynamic state reachable from the initial one (step counter ignored).
pub fn reachable_states(spec: &LevelSpec) -> Vec<EnvState> {
    let start = EnvState::initial(spec);
    let key = |s: &EnvState| EnvState { steps: 0, ..*s };
    let mut seen = HashSet::from([key(&start)]);
    let mut order = vec![key(&start)];
    let mut queue = VecDeque::from([key(&start)]);
    while let Some(s) = queue.pop_front() {
        if !s.alive {
            continue;
        }
        for a in Action::all() {
            let next = key(&transition(spec, &s, a));
            if seen.insert(next) {
                order.push(next);
                queue.push_back(next);
            }
        }
    }
    order
}

pub fn random_observation<R: Rng + ?Sized>(rng: &mut R, h: usize, w: usize) -> Observation {
    Observation::new(h, w, (0..h * w).map(|_| rng.gen::<f32>()).collect()).unwrap()
}

/// Central finite difference of `loss` against `analytic` at each of `indices`.
/// Returns the relative errors `|a - n| / max(|a|, |n|, floor)`.
pub fn finite_difference_errors(
    base: &[f64],
    analytic: &[f64],
    indices: &[usize],
    eps: f64,
    floor: f64,
    loss: &mut dyn FnMut(&[f64]) -> f64,
) -> Vec<f64> {
    indices
        .iter()
        .map(|&i| {
            let mut p = base.to_vec();
            p[i] = base[i] + eps;
            let up = loss(&p);
            p[i] = base[i] - eps;
            let down = loss(&p);
            let numeric = (up - down) / (2.0 * eps);
            let scale = analytic[i].abs().max(numeric.abs()).max(floor);
            (analytic[i] - numeric).abs() / scale
        })
        .collect()
}

/// `count` distinct parameter indices whose analytic gradient is not negligible,
/// so that probes exercise real derivative paths.
pub fn informative_indices<R: Rng + ?Sized>(analytic: &[f64], count: usize, rng: &mut R) -> Vec<usize> {
    let candidates: Vec<usize> = (0..analytic.len()).filter(|&i| analytic[i].abs() > 1e-6).collect();
    assert!(candidates.len() >= count, "only {} informative parameters", candidates.len());
    let picked: BTreeSet<usize> = rand::seq::index::sample(rng, candidates.len(), count)
        .into_iter()
        .map(|k| candidates[k])
        .collect();
    picked.into_iter().collect()
}

/// A graph with one cluster per entry of `visits`, no arcs, ids `0..visits.len()`.
pub fn graph_with_visits(visits: &[u64]) -> rbx_core::graph::ClusterGraph {
    use rbx_core::graph::{Cluster, ClusterGraph, ClusterId};
    use rbx_core::pmdp::{Snapshot, UnitId};
    let clusters = visits
        .iter()
        .enumerate()
        .map(|(i, &v)| Cluster {
            id: ClusterId(i as u32),
            center: Observation::new(1, 1, vec![i as f32 / 256.0]).unwrap(),
            snapshot: Snapshot::new(1, vec![i as u8]),
            unit: Some(UnitId(i as u32)),
            visit_count: v,
            created_at: i as u64,
        })
        .collect();
    let parents = (1..visits.len())
        .map(|i| {
            (
                ClusterId(i as u32),
                rbx_core::graph::ParentArc {
                    parent: ClusterId(0),
                    prefix: vec![Observation::new(1, 1, vec![i as f32 / 256.0]).unwrap()],
                },
            )
        })
        .collect();
    ClusterGraph::from_parts(clusters, Vec::new(), parents, ClusterId(0), visits.len() as u32)
}

/// Pearson χ² of `draws` inverse-visit samples against `1 / (1 + visits)`.
/// Returns the statistic and its upper-tail p-value.
pub fn inverse_visit_chi_square(visits: &[u64], draws: usize, seed: u64) -> (f64, f64) {
    use rand::SeedableRng;
    use statrs::distribution::{ChiSquared, ContinuousCDF};
    let graph = graph_with_visits(visits);
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut counts = vec![0u64; visits.len()];
    for id in graph.sample_clusters(draws, &mut rng) {
        counts[id.0 as usize] += 1;
    }
    let weights: Vec<f64> = visits.iter().map(|&v| 1.0 / (1.0 + v as f64)).collect();
    let total: f64 = weights.iter().sum();
    let stat: f64 = counts
        .iter()
        .zip(&weights)
        .map(|(&c, w)| {
            let expected = draws as f64 * w / total;
            (c as f64 - expected).powi(2) / expected
        })
        .sum();
    let dist = ChiSquared::new((visits.len() - 1) as f64).unwrap();
    (stat, 1.0 - dist.cdf(stat))
}

/// Random labelled pairs of random observations.
pub fn random_pairs<R: Rng + ?Sized>(
    rng: &mut R,
    count: usize,
    h: usize,
    w: usize,
) -> Vec<rbx_core::similarity::PairExample> {
    (0..count)
        .map(|k| rbx_core::similarity::PairExample {
            a: random_observation(rng, h, w),
            b: random_observation(rng, h, w),
            label: (k % 2) as u8,
        })
        .collect()
}

/// Relative errors of `probes` finite-difference checks on the similarity model's gradient.
pub fn similarity_gradient_errors(seed: u64, probes: usize, eps: f64) -> Vec<f64> {
    use rand::SeedableRng;
    use rbx_core::nn::ParamSet;
    use rbx_core::similarity::{PairDataset, SimilarityConfig, SimilarityModel};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let model = SimilarityModel::new(SimilarityConfig::default(), &mut rng);
    let pairs = random_pairs(&mut rng, 16, 24, 24);
    let (_, analytic) = model.gradient(&pairs);
    let base = model.flat_params();
    let indices = informative_indices(&analytic, probes, &mut rng);
    let data = PairDataset { examples: pairs };
    let mut probe = model.clone();
    finite_difference_errors(&base, &analytic, &indices, eps, 1e-8, &mut |p| {
        probe.set_flat_params(p);
        probe.loss(&data)
    })
}

/// Relative errors of `probes` finite-difference checks on the RND predictor's gradient.
pub fn rnd_gradient_errors(seed: u64, probes: usize, eps: f64) -> Vec<f64> {
    use rand::SeedableRng;
    use rbx_core::nn::ParamSet;
    use rbx_core::rnd::{RndConfig, RndModule};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut module = RndModule::new(RndConfig::default(), &mut rng);
    let warm: Vec<Observation> = (0..64).map(|_| random_observation(&mut rng, 24, 24)).collect();
    module.update_normalizers(&warm.iter().collect::<Vec<_>>());
    let batch: Vec<Observation> = (0..16).map(|_| random_observation(&mut rng, 24, 24)).collect();
    let refs: Vec<&Observation> = batch.iter().collect();
    let (_, grads) = module.predictor_loss_and_grad(&refs);
    let analytic = grads.flat_params();
    let base = module.predictor().flat_params();
    let indices = informative_indices(&analytic, probes, &mut rng);
    let mut probe = module.clone();
    finite_difference_errors(&base, &analytic, &indices, eps, 1e-8, &mut |p| {
        probe.predictor_mut().set_flat_params(p);
        probe.predictor_loss_and_grad(&refs).0
    })
}

/// Small, fast exploration settings for tests.
pub fn small_config(seed: u64) -> rbx_core::explore::RbConfig {
    rbx_core::explore::RbConfig {
        clusters_per_iteration: 6,
        novel_rollouts: 4,
        max_rollout_steps: 60,
        pretrain_steps: 0,
        sim_encoder_hidden: 16,
        sim_embedding_dim: 16,
        sim_head_hidden: 16,
        rnd_hidden: 16,
        rnd_output: 8,
        rnd_warmup: 100,
        merge_every: 3,
        budget: 6_000,
        seed,
        ..rbx_core::explore::RbConfig::default()
    }
}

/// Run the explorer with the unit oracle and check the oracle-graph equivalences:
/// one cluster per distinct visited unit, a no-op merge pass and sound invariants.
pub fn oracle_run_check(text: &str, config: rbx_core::explore::RbConfig) -> Result<(), String> {
    use rbx_core::explore::Explorer;
    use rbx_core::similarity::UnitOracle;
    let spec = level(text);
    let env = PersiaLite::new(spec).unwrap();
    let mut explorer = Explorer::new(env, config, true).map_err(|e| e.to_string())?;
    explorer.run(&mut |_| Ok(())).map_err(|e| e.to_string())?;
    let graph = explorer.graph();
    graph.check_invariants()?;
    let units: BTreeSet<_> = graph.clusters().map(|c| c.unit).collect();
    if units.len() != graph.len() {
        return Err(format!("{} clusters share {} units", graph.len(), units.len()));
    }
    let visited = explorer.visited_units().len();
    if graph.len() != visited {
        return Err(format!("{} clusters but {visited} distinct units visited", graph.len()));
    }
    let mut merged = graph.clone();
    if merged.merge_pass(&UnitOracle, explorer.config().theta_merge) != 0 || &merged != graph {
        return Err("merge pass changed the oracle graph".into());
    }
    Ok(())
}
