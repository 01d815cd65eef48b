//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any fails.

mod common;

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rbx_core::harness::{self, Algorithm, ExperimentConfig, RunRecord};
use rbx_core::persia::{bundled, PersiaLite};
use rbx_core::pmdp::{Action, PersistentMdp};
use rbx_core::similarity::sample_pair_indices;

use common::{
    inverse_visit_chi_square, level, oracle_run_check, rnd_gradient_errors, similarity_gradient_errors,
    small_config,
};

type Outcome = Result<String, String>;

const SEEDS: [u64; 3] = [0, 1, 2];
/// Coverage means are sums of floats in varying order; closer than this is a tie.
const TIE: f64 = 1e-9;

fn persistence() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut envs = [bundled::L1, bundled::TWIN].map(|t| PersiaLite::new(level(t)).unwrap());
    let play = |env: &mut PersiaLite, actions: &[Action]| -> Vec<(Vec<u32>, Vec<u8>)> {
        let mut out = Vec::new();
        for &a in actions {
            let r = env.step(a).unwrap();
            out.push((r.observation.to_bits(), env.save_snapshot().bytes().to_vec()));
            if r.terminated {
                break;
            }
        }
        out
    };
    for trial in 0..1_000 {
        let env = &mut envs[trial % 2];
        env.reset();
        let prefix: Vec<Action> = (0..rng.gen_range(0..200)).map(|_| Action::sample(&mut rng)).collect();
        let suffix: Vec<Action> = (0..rng.gen_range(1..200)).map(|_| Action::sample(&mut rng)).collect();
        play(env, &prefix);
        if !env.state().alive {
            env.reset();
        }
        let snap = env.save_snapshot();
        let first = play(env, &suffix);
        env.restore_snapshot(&snap).map_err(|e| format!("trial {trial}: {e}"))?;
        if env.save_snapshot() != snap {
            return Err(format!("trial {trial}: restored state re-encodes differently"));
        }
        if play(env, &suffix) != first {
            return Err(format!("trial {trial}: replay diverged"));
        }
    }
    let elapsed = start.elapsed();
    if elapsed >= Duration::from_secs(10) {
        return Err(format!("1000 round-trips took {elapsed:.2?}"));
    }
    Ok(format!("1000 round-trips byte-identical in {elapsed:.2?}"))
}

fn gradients() -> Outcome {
    let worst = |e: &[f64]| e.iter().copied().fold(0.0, f64::max);
    let sim = similarity_gradient_errors(0, 60, 1e-5);
    let rnd = rnd_gradient_errors(0, 60, 1e-5);
    let msg = format!(
        "{} + {} probes, worst relative error {:.2e} (similarity) / {:.2e} (RND)",
        sim.len(),
        rnd.len(),
        worst(&sim),
        worst(&rnd)
    );
    if worst(&sim) < 1e-3 && worst(&rnd) < 1e-3 {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn pairs() -> Outcome {
    let (n, big_n) = (5, 25);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut emitted = 0;
    for _ in 0..100 {
        let len = rng.gen_range(2..=400);
        for (i, j, label) in sample_pair_indices(len, n, big_n, 64, &mut rng).map_err(|e| e.to_string())? {
            let d = i.abs_diff(j);
            let expected = if d < n { Some(1) } else if d > big_n { Some(0) } else { None };
            if i >= len || j >= len || expected != Some(label) {
                return Err(format!("len {len}: pair ({i}, {j}) labelled {label}"));
            }
            emitted += 1;
        }
    }
    Ok(format!("{emitted} pairs from 100 trajectories, none mislabelled or in the gray zone"))
}

fn oracle_equivalence() -> Outcome {
    for seed in 0..20 {
        let text = if seed % 4 == 3 { bundled::TWIN } else { bundled::L1 };
        oracle_run_check(text, small_config(seed)).map_err(|e| format!("seed {seed}: {e}"))?;
    }
    Ok("20 seeded oracle runs: clusters = distinct units, merge no-op, invariants hold".into())
}

struct Experiments {
    dir: tempfile::TempDir,
    base: ExperimentConfig,
    config_dir: PathBuf,
}

impl Experiments {
    fn new() -> Self {
        let config_dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
        let text = std::fs::read_to_string(config_dir.join("l1.conf")).expect("configs/l1.conf");
        Experiments {
            dir: tempfile::tempdir().unwrap(),
            base: ExperimentConfig::parse(&text).expect("l1.conf parses"),
            config_dir,
        }
    }

    fn run(&self, name: &str, seed: u64, overrides: &[(&str, &str)]) -> Result<RunRecord, String> {
        let mut pairs = vec![("seed".to_string(), seed.to_string())];
        pairs.extend(overrides.iter().map(|(k, v)| (k.to_string(), v.to_string())));
        let config = self.base.with_overrides(&pairs).map_err(|e| e.to_string())?;
        let out = self.dir.path().join(format!("{name}-seed{seed}"));
        let start = Instant::now();
        let record = harness::run_experiment(&config, &self.config_dir, &out).map_err(|e| e.to_string())?;
        eprintln!(
            "  {name:<22} seed {seed}: {:6.2}% in {:.1?}",
            record.final_coverage,
            start.elapsed()
        );
        Ok(record)
    }

    fn metrics(&self, name: &str, seed: u64) -> Vec<u8> {
        std::fs::read(self.dir.path().join(format!("{name}-seed{seed}")).join(harness::METRICS_FILE))
            .unwrap_or_default()
    }
}

fn coverage_of(ex: &Experiments, name: &str, overrides: &[(&str, &str)]) -> Result<Vec<f64>, String> {
    SEEDS
        .iter()
        .map(|&s| ex.run(name, s, overrides).map(|r| r.final_coverage))
        .collect()
}

fn bracketing(random: &[f64], learned: &[f64], oracle: &[f64]) -> Outcome {
    let mut msg = String::new();
    let mut ok = true;
    for k in 0..SEEDS.len() {
        let holds = random[k] < learned[k] && learned[k] <= oracle[k] && oracle[k] >= 95.0;
        ok &= holds;
        let _ = write!(
            msg,
            "seed {}: {:.1} < {:.1} <= {:.1}{}; ",
            SEEDS[k],
            random[k],
            learned[k],
            oracle[k],
            if holds { "" } else { " (violated)" }
        );
    }
    let msg = msg.trim_end_matches("; ").to_string();
    if ok {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn ablations(ex: &Experiments, full: &[f64]) -> Outcome {
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let full_mean = mean(full);
    let variants: [(&str, &[(&str, &str)]); 4] = [
        ("no-merge", &[("no_merge", "true")]),
        ("no-prefix-negatives", &[("no_prefix_negatives", "true")]),
        ("theta-merge-0.25", &[("theta_merge", "0.25")]),
        ("theta-merge-0.75", &[("theta_merge", "0.75")]),
    ];
    let mut table = format!("\n      {:<22} {:>8}  per seed\n", "variant", "mean %");
    let _ = writeln!(table, "      {:<22} {:>8.2}  {:?}", "full (theta-merge 0.5)", full_mean, full);
    let mut ok = true;
    for (name, overrides) in variants {
        let cov = coverage_of(ex, name, overrides)?;
        let m = mean(&cov);
        let holds = full_mean + TIE >= m;
        ok &= holds;
        let verdict = if !holds {
            "full worse"
        } else if (full_mean - m).abs() <= TIE {
            "tie"
        } else {
            "full better"
        };
        let _ = writeln!(table, "      {name:<22} {m:>8.2}  {cov:?}  {verdict}");
    }
    let table = table.trim_end().to_string();
    if ok {
        Ok(table)
    } else {
        Err(table)
    }
}

fn determinism(ex: &Experiments) -> Outcome {
    ex.run("rbexplore-repeat", 0, &[])?;
    let (a, b) = (ex.metrics("rbexplore", 0), ex.metrics("rbexplore-repeat", 0));
    if a.is_empty() {
        return Err("no metrics.csv from the first run".into());
    }
    if a == b {
        Ok(format!("metrics.csv byte-identical across two runs ({} bytes)", a.len()))
    } else {
        Err("metrics.csv differs between two identical runs".into())
    }
}

fn sampling() -> Outcome {
    let visits = [0, 1, 3, 9, 24];
    let (stat, p) = inverse_visit_chi_square(&visits, 100_000, 0);
    let msg = format!("visits {visits:?}, 1e5 draws: chi2 = {stat:.3}, p = {p:.3}");
    if p > 0.01 {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn main() -> ExitCode {
    let mut results: Vec<(&str, Outcome)> = vec![
        ("1 persistence", persistence()),
        ("2 gradient oracles", gradients()),
        ("3 pair generation", pairs()),
        ("4 oracle graph", oracle_equivalence()),
    ];

    let ex = Experiments::new();
    let random = coverage_of(&ex, "random", &[("algo", Algorithm::Random.as_str())]);
    let learned = coverage_of(&ex, "rbexplore", &[]);
    let oracle = coverage_of(&ex, "rbexplore-oracle", &[("algo", Algorithm::RbexploreOracle.as_str())]);
    let (bracket, ablation) = match (&random, &learned, &oracle) {
        (Ok(r), Ok(l), Ok(o)) => (bracketing(r, l, o), ablations(&ex, l)),
        _ => {
            let e = [random, learned.clone(), oracle].into_iter().find_map(Result::err).unwrap();
            (Err(e.clone()), Err(e))
        }
    };
    results.push(("5 coverage bracketing", bracket));
    results.push(("6 ablation trends", ablation));
    results.push(("7 determinism", determinism(&ex)));
    results.push(("8 sampling distribution", sampling()));

    let mut failed = 0;
    for (name, outcome) in &results {
        match outcome {
            Ok(msg) => println!("PASS {name}: {msg}"),
            Err(msg) => {
                failed += 1;
                println!("FAIL {name}: {msg}");
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", results.len() - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
