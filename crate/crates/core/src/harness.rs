//! Experiment plumbing: configuration files, the random baseline, per-run
//! output files and cross-seed summaries.

use std::collections::BTreeSet;
use std::fmt;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::explore::{derived_rng, ExploreError, Explorer, IterationReport, RbConfig};
use crate::graph_io::{self, GraphIoError};
use crate::persia::{self, bundled, LevelSpec, ParseError, PersiaLite, Pos, StateCapExceeded, Tile};
use crate::pmdp::{Action, PersistentMdp, UnitId};

pub const METRICS_FILE: &str = "metrics.csv";
pub const RUN_FILE: &str = "run.json";
pub const MAP_FILE: &str = "coverage.pgm";
pub const SUMMARY_FILE: &str = "summary.csv";
/// Coverage checkpoints per run in summaries.
pub const SUMMARY_CHECKPOINTS: u64 = 20;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("{0}")]
    Config(String),
    #[error("unknown config key `{key}`; valid keys: {}", valid.join(", "))]
    UnknownKey { key: String, valid: Vec<String> },
    #[error("level {name}: {source}")]
    Level { name: String, source: ParseError },
    #[error("level {0}")]
    Environment(String),
    #[error(transparent)]
    Reach(#[from] StateCapExceeded),
    #[error(transparent)]
    Explore(#[from] ExploreError),
    #[error(transparent)]
    Graph(#[from] GraphIoError),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("{path}: {source}")]
    Csv { path: PathBuf, source: csv::Error },
    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        source: serde_json::Error,
    },
    #[error("runs are not comparable: {0}")]
    Misaligned(String),
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> HarnessError + '_ {
    move |source| HarnessError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Algorithm {
    Random,
    Rbexplore,
    RbexploreOracle,
}

impl Algorithm {
    pub const ALL: [Algorithm; 3] = [Algorithm::Random, Algorithm::Rbexplore, Algorithm::RbexploreOracle];

    pub fn as_str(self) -> &'static str {
        match self {
            Algorithm::Random => "random",
            Algorithm::Rbexplore => "rbexplore",
            Algorithm::RbexploreOracle => "rbexplore-oracle",
        }
    }
}

impl fmt::Display for Algorithm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Algorithm {
    type Err = HarnessError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Algorithm::ALL
            .into_iter()
            .find(|a| a.as_str() == s)
            .ok_or_else(|| {
                HarnessError::Config(format!(
                    "unknown algorithm `{s}`; expected one of random, rbexplore, rbexplore-oracle"
                ))
            })
    }
}

/// Everything that determines a run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    /// Bundled level name (`L1`, `twin`) or a level file path, relative to the config file.
    pub level: String,
    pub algo: Algorithm,
    #[serde(flatten)]
    pub rb: RbConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            level: "L1".into(),
            algo: Algorithm::Rbexplore,
            rb: RbConfig::default(),
        }
    }
}

impl ExperimentConfig {
    /// Every key accepted in config files and overrides.
    pub fn valid_keys() -> Vec<String> {
        let value = serde_json::to_value(ExperimentConfig::default()).expect("config serializes");
        value.as_object().expect("object").keys().cloned().collect()
    }

    /// Parse `key = value` lines; `#` starts a comment. Later keys must not repeat earlier ones.
    pub fn parse(text: &str) -> Result<Self, HarnessError> {
        let mut pairs = Vec::new();
        let mut seen = BTreeSet::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                HarnessError::Config(format!("line {}: expected `key = value`, got `{line}`", lineno + 1))
            })?;
            let key = key.trim().to_string();
            if !seen.insert(key.clone()) {
                return Err(HarnessError::Config(format!("line {}: duplicate key `{key}`", lineno + 1)));
            }
            pairs.push((key, value.trim().to_string()));
        }
        ExperimentConfig::default().with_overrides(&pairs)
    }

    /// Apply `key = value` assignments on top of `self`.
    pub fn with_overrides(&self, pairs: &[(String, String)]) -> Result<Self, HarnessError> {
        let mut value = serde_json::to_value(self).expect("config serializes");
        let map = value.as_object_mut().expect("object");
        for (key, raw) in pairs {
            let Some(slot) = map.get_mut(key) else {
                return Err(HarnessError::UnknownKey {
                    key: key.clone(),
                    valid: ExperimentConfig::valid_keys(),
                });
            };
            *slot = scalar(raw);
            // Check each assignment on its own so errors name the key.
            let probe = serde_json::Value::Object(map.clone());
            if let Err(e) = serde_json::from_value::<ExperimentConfig>(probe) {
                return Err(HarnessError::Config(format!("{key} = {raw}: {e}")));
            }
        }
        let config: ExperimentConfig = serde_json::from_value(value).expect("checked above");
        config.rb.validate()?;
        Ok(config)
    }

    /// SHA-256 of the canonical JSON form, hex encoded.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        Sha256::digest(&json).iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Resolve and parse the level, looking up relative paths from `base`.
    pub fn load_level(&self, base: &Path) -> Result<LevelSpec, HarnessError> {
        let text = match bundled::by_name(&self.level) {
            Some(text) => text.to_string(),
            None => {
                let path = base.join(&self.level);
                fs::read_to_string(&path).map_err(io_err(&path))?
            }
        };
        LevelSpec::parse(&text).map_err(|source| HarnessError::Level {
            name: self.level.clone(),
            source,
        })
    }
}

fn scalar(raw: &str) -> serde_json::Value {
    use serde_json::Value;
    match raw {
        "true" => Value::Bool(true),
        "false" => Value::Bool(false),
        _ => {
            if let Ok(u) = raw.parse::<u64>() {
                Value::from(u)
            } else if let Ok(f) = raw.parse::<f64>() {
                Value::from(f)
            } else {
                Value::String(raw.to_string())
            }
        }
    }
}

/// One row of `metrics.csv`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub iteration: u64,
    pub env_steps: u64,
    pub clusters: usize,
    pub merges: usize,
    pub novel_flagged: usize,
    pub sim_loss: f64,
    pub rnd_loss: f64,
    pub coverage_pct: f64,
}

pub const METRICS_HEADER: &str =
    "iteration,env_steps,clusters,merges,novel_flagged,sim_loss,rnd_loss,coverage_pct";

impl From<&IterationReport> for MetricsRow {
    fn from(r: &IterationReport) -> Self {
        MetricsRow {
            iteration: r.iteration,
            env_steps: r.env_steps,
            clusters: r.clusters,
            merges: r.merges,
            novel_flagged: r.novel_flagged,
            sim_loss: r.sim_loss,
            rnd_loss: r.rnd_loss,
            coverage_pct: r.coverage_pct,
        }
    }
}

/// Appends rows to `metrics.csv`, flushing each one.
pub struct MetricsWriter {
    path: PathBuf,
    inner: csv::Writer<fs::File>,
    rows: usize,
}

impl MetricsWriter {
    pub fn create(path: &Path) -> Result<Self, HarnessError> {
        let file = fs::File::create(path).map_err(io_err(path))?;
        Ok(MetricsWriter {
            path: path.to_path_buf(),
            inner: csv::Writer::from_writer(file),
            rows: 0,
        })
    }

    pub fn write(&mut self, row: &MetricsRow) -> io::Result<()> {
        self.inner.serialize(row).map_err(io::Error::other)?;
        self.inner.flush()?;
        self.rows += 1;
        Ok(())
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn path(&self) -> &Path {
        &self.path
    }
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRow>, HarnessError> {
    let csv_err = |source| HarnessError::Csv {
        path: path.to_path_buf(),
        source,
    };
    let mut reader = csv::Reader::from_path(path).map_err(csv_err)?;
    let header = reader.headers().map_err(csv_err)?.iter().collect::<Vec<_>>().join(",");
    if header != METRICS_HEADER {
        return Err(HarnessError::Config(format!(
            "{}: unexpected header `{header}`",
            path.display()
        )));
    }
    reader
        .deserialize()
        .collect::<Result<Vec<MetricsRow>, _>>()
        .map_err(csv_err)
}

/// Called after each baseline episode with (episode, cumulative steps, visited units).
pub type EpisodeSink<'a> = dyn FnMut(u64, u64, &BTreeSet<UnitId>) -> io::Result<()> + 'a;

/// Outcome of the random baseline.
#[derive(Clone, Debug, PartialEq)]
pub struct BaselineResult {
    pub visited: BTreeSet<UnitId>,
    pub env_steps: u64,
    pub episodes: u64,
}

/// Episodes of uniformly random actions from the initial state until `budget`
/// steps are spent. Episodes end on death or after `max_episode_steps`.
/// Snapshots are never used. `on_episode` sees (episode, cumulative steps, visited).
pub fn random_baseline<E, R>(
    env: &mut E,
    budget: u64,
    max_episode_steps: usize,
    rng: &mut R,
    on_episode: &mut EpisodeSink<'_>,
) -> Result<BaselineResult, HarnessError>
where
    E: PersistentMdp + ?Sized,
    R: Rng + ?Sized,
{
    if budget == 0 || max_episode_steps == 0 {
        return Err(HarnessError::Config("budget and episode length must be positive".into()));
    }
    let env_err = |e: crate::pmdp::EnvError| HarnessError::Explore(e.into());
    let mut result = BaselineResult {
        visited: BTreeSet::new(),
        env_steps: 0,
        episodes: 0,
    };
    while result.env_steps < budget {
        env.reset();
        result.visited.insert(env.unit().map_err(env_err)?);
        for _ in 0..max_episode_steps {
            if result.env_steps >= budget {
                break;
            }
            let step = env.step(Action::sample(rng)).map_err(env_err)?;
            result.env_steps += step.env_steps_consumed;
            if step.terminated {
                break;
            }
            result.visited.insert(env.unit().map_err(env_err)?);
        }
        result.episodes += 1;
        on_episode(result.episodes, result.env_steps, &result.visited).map_err(|e| HarnessError::Io {
            path: PathBuf::from(METRICS_FILE),
            source: e,
        })?;
    }
    Ok(result)
}

/// What a finished run leaves behind in `run.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub config_hash: String,
    pub seed: u64,
    pub algo: Algorithm,
    pub budget: u64,
    pub level_name: String,
    pub level_fingerprint: u64,
    pub level_text: String,
    pub iterations: u64,
    pub env_steps: u64,
    pub final_coverage: f64,
    pub reachable_units: usize,
    pub visited_units: Vec<u32>,
    pub metrics: String,
    pub graph: Option<String>,
    pub config: ExperimentConfig,
}

impl RunRecord {
    pub fn load(dir: &Path) -> Result<Self, HarnessError> {
        let path = dir.join(RUN_FILE);
        let bytes = fs::read(&path).map_err(io_err(&path))?;
        serde_json::from_slice(&bytes).map_err(|source| HarnessError::Json { path, source })
    }

    pub fn level(&self) -> Result<LevelSpec, HarnessError> {
        LevelSpec::parse(&self.level_text).map_err(|source| HarnessError::Level {
            name: self.level_name.clone(),
            source,
        })
    }

    pub fn visited(&self) -> BTreeSet<UnitId> {
        self.visited_units.iter().copied().map(UnitId).collect()
    }
}

/// Paired comparisons need the same level, seed and budget.
pub fn check_paired(a: &RunRecord, b: &RunRecord) -> Result<(), HarnessError> {
    if a.level_fingerprint != b.level_fingerprint {
        return Err(HarnessError::Misaligned(format!(
            "levels differ ({} vs {})",
            a.level_name, b.level_name
        )));
    }
    if a.seed != b.seed || a.budget != b.budget {
        return Err(HarnessError::Misaligned(format!(
            "seed/budget {}/{} vs {}/{}",
            a.seed, a.budget, b.seed, b.budget
        )));
    }
    Ok(())
}

/// Run one experiment, writing `metrics.csv`, `run.json` and (for the graph
/// based algorithms) `graph.json` + `graph.bin` into `out`. Relative level
/// paths are resolved from `base`.
pub fn run_experiment(
    config: &ExperimentConfig,
    base: &Path,
    out: &Path,
) -> Result<RunRecord, HarnessError> {
    config.rb.validate()?;
    let spec = Arc::new(config.load_level(base)?);
    let reachable = persia::reachable_units(&spec)?;
    let env = PersiaLite::new(spec.clone()).map_err(HarnessError::Environment)?;
    fs::create_dir_all(out).map_err(io_err(out))?;
    let mut metrics = MetricsWriter::create(&out.join(METRICS_FILE))?;

    let rb = &config.rb;
    let (visited, iterations, env_steps, graph) = match config.algo {
        Algorithm::Random => {
            let mut env = env;
            let mut rng = derived_rng(rb.seed, 1);
            let result = random_baseline(
                &mut env,
                rb.budget,
                rb.max_rollout_steps,
                &mut rng,
                &mut |episode, steps, visited| {
                    metrics.write(&MetricsRow {
                        iteration: episode,
                        env_steps: steps,
                        clusters: 0,
                        merges: 0,
                        novel_flagged: 0,
                        sim_loss: f64::NAN,
                        rnd_loss: f64::NAN,
                        coverage_pct: persia::coverage(visited, &reachable),
                    })
                },
            )?;
            (result.visited, result.episodes, result.env_steps, None)
        }
        Algorithm::Rbexplore | Algorithm::RbexploreOracle => {
            let oracle = config.algo == Algorithm::RbexploreOracle;
            let mut explorer = Explorer::new(env, rb.clone(), oracle)?.with_reachable(reachable.clone());
            explorer.run(&mut |r| metrics.write(&MetricsRow::from(r)))?;
            graph_io::save(explorer.graph(), out)?;
            (
                explorer.visited_units().clone(),
                explorer.iteration(),
                explorer.env_steps(),
                Some("graph.json".to_string()),
            )
        }
    };

    let record = RunRecord {
        config_hash: config.hash(),
        seed: rb.seed,
        algo: config.algo,
        budget: rb.budget,
        level_name: spec.name().to_string(),
        level_fingerprint: spec.fingerprint(),
        level_text: spec.to_text(),
        iterations,
        env_steps,
        final_coverage: persia::coverage(&visited, &reachable),
        reachable_units: reachable.len(),
        visited_units: visited.iter().map(|u| u.0).collect(),
        metrics: METRICS_FILE.into(),
        graph,
        config: config.clone(),
    };
    debug_assert_eq!(metrics.rows() as u64, iterations);
    let path = out.join(RUN_FILE);
    let json = serde_json::to_vec_pretty(&record).map_err(|source| HarnessError::Json {
        path: path.clone(),
        source,
    })?;
    fs::write(&path, json).map_err(io_err(&path))?;
    Ok(record)
}

const PGM_WALL: u8 = 0;
const PGM_UNVISITED: u8 = 64;
const PGM_MARKER: u8 = 128;
const PGM_VISITED: u8 = 255;

/// Binary PGM (P5) with a `block`×`block` pixel square per tile: walls black,
/// visited tiles white, unvisited traps and doors mid-gray, other unvisited
/// walkable tiles dark gray.
pub fn render_coverage_map(spec: &LevelSpec, visited: &BTreeSet<UnitId>, block: usize) -> Vec<u8> {
    let (h, w) = (spec.height() * block, spec.width() * block);
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.reserve(h * w);
    for y in 0..h {
        for x in 0..w {
            let pos = Pos::new(y / block, x / block);
            let tile = spec.tile(pos);
            let shade = if tile == Tile::Wall {
                PGM_WALL
            } else if spec.unit_of(pos).is_some_and(|u| visited.contains(&u)) {
                PGM_VISITED
            } else if tile == Tile::Trap || tile.is_door() {
                PGM_MARKER
            } else {
                PGM_UNVISITED
            };
            out.push(shade);
        }
    }
    out
}

/// Render `coverage.pgm` for the run in `dir`; returns its path.
pub fn write_coverage_map(dir: &Path, block: usize) -> Result<PathBuf, HarnessError> {
    let record = RunRecord::load(dir)?;
    let spec = record.level()?;
    let image = render_coverage_map(&spec, &record.visited(), block);
    let path = dir.join(MAP_FILE);
    fs::write(&path, image).map_err(io_err(&path))?;
    Ok(path)
}

/// Mean, min and max coverage across runs at one checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub env_steps: u64,
    pub mean: f64,
    pub min: f64,
    pub max: f64,
    pub runs: usize,
}

/// Coverage at `steps`: the last row at or before it, 0 before the first row.
fn coverage_at(rows: &[MetricsRow], steps: u64) -> f64 {
    rows.iter()
        .take_while(|r| r.env_steps <= steps)
        .last()
        .map_or(0.0, |r| r.coverage_pct)
}

/// Aggregate coverage curves of runs sharing one budget at evenly spaced checkpoints.
pub fn summarize(runs: &[(RunRecord, Vec<MetricsRow>)]) -> Result<Vec<SummaryRow>, HarnessError> {
    let Some((first, _)) = runs.first() else {
        return Err(HarnessError::Misaligned("no runs to summarize".into()));
    };
    for (r, _) in runs {
        if r.budget != first.budget {
            return Err(HarnessError::Misaligned(format!(
                "budgets differ: {} vs {}",
                first.budget, r.budget
            )));
        }
    }
    let points = SUMMARY_CHECKPOINTS.min(first.budget);
    Ok((1..=points)
        .map(|k| {
            let steps = first.budget * k / points;
            let values: Vec<f64> = runs.iter().map(|(_, rows)| coverage_at(rows, steps)).collect();
            SummaryRow {
                env_steps: steps,
                mean: values.iter().sum::<f64>() / values.len() as f64,
                min: values.iter().copied().fold(f64::INFINITY, f64::min),
                max: values.iter().copied().fold(f64::NEG_INFINITY, f64::max),
                runs: values.len(),
            }
        })
        .collect())
}

/// Load the runs in `dirs`, summarize them and write the table to `out`.
pub fn summarize_dirs(dirs: &[PathBuf], out: &Path) -> Result<Vec<SummaryRow>, HarnessError> {
    let runs = dirs
        .iter()
        .map(|d| Ok((RunRecord::load(d)?, read_metrics(&d.join(METRICS_FILE))?)))
        .collect::<Result<Vec<_>, HarnessError>>()?;
    let rows = summarize(&runs)?;
    let csv_err = |source| HarnessError::Csv {
        path: out.to_path_buf(),
        source,
    };
    let mut w = csv::Writer::from_path(out).map_err(csv_err)?;
    for row in &rows {
        w.serialize(row).map_err(csv_err)?;
    }
    w.flush().map_err(io_err(out))?;
    Ok(rows)
}
