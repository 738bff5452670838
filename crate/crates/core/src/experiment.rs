//! Seeded episode batches, metrics tables and scores.

use std::fs;
use std::io::Write as _;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::baselines::{firm_execute, ogr_execute, urm_pomcp_plan_and_execute, OgrConfig, UrmConfig, UrmSetup};
use crate::beliefs::GaussianBelief;
use crate::bvl::{plan_and_execute, PlannerConfig};
use crate::controllers::ControlError;
use crate::episode::{EpisodeLog, EpisodeRecorder, EpisodeRngs, Outcome, GLOBAL_STEP_CAP};
use crate::firm::{build_and_solve, FirmConfig, FirmGraph, GraphError};
use crate::models::Models;
use crate::simulation::sample_state;
use crate::world::{generate_rnp_with, Environment, RnpGeometry, RnpSpec, WorldError};

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error("infeasible: {0}")]
    Infeasible(String),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Control(#[from] ControlError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl ExperimentError {
    pub fn is_infeasible(&self) -> bool {
        matches!(
            self,
            ExperimentError::Infeasible(_)
                | ExperimentError::Graph(GraphError::Goal(_) | GraphError::TooFewNodes { .. } | GraphError::World(_))
        )
    }
}

impl From<WorldError> for ExperimentError {
    fn from(e: WorldError) -> Self {
        match e {
            WorldError::InfeasibleSpec(_) | WorldError::InfeasibleEnvironment(_) | WorldError::BlockedEndpoint(_) => {
                ExperimentError::Infeasible(e.to_string())
            }
            other => ExperimentError::Config(other.to_string()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PlannerKind {
    Bvl,
    Urm,
    Firm,
    Ogr,
}

impl PlannerKind {
    pub fn name(&self) -> &'static str {
        match self {
            PlannerKind::Bvl => "bvl",
            PlannerKind::Urm => "urm",
            PlannerKind::Firm => "firm",
            PlannerKind::Ogr => "ogr",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s.to_ascii_lowercase().as_str() {
            "bvl" => Some(PlannerKind::Bvl),
            "urm" | "urm-pomcp" => Some(PlannerKind::Urm),
            "firm" => Some(PlannerKind::Firm),
            "ogr" => Some(PlannerKind::Ogr),
            _ => None,
        }
    }

    pub fn needs_graph(&self) -> bool {
        !matches!(self, PlannerKind::Urm)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    ObstacleO,
    FirmNodes,
}

impl SweepAxis {
    pub fn name(&self) -> &'static str {
        match self {
            SweepAxis::ObstacleO => "obstacle_o",
            SweepAxis::FirmNodes => "firm_nodes",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "obstacle_o" => Some(SweepAxis::ObstacleO),
            "firm_nodes" => Some(SweepAxis::FirmNodes),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepSpec {
    pub axis: SweepAxis,
    pub values: Vec<f64>,
}

fn default_runs() -> usize {
    20
}

fn default_cap() -> usize {
    GLOBAL_STEP_CAP
}

fn default_initial_cov() -> [f64; 3] {
    [0.01, 0.01, 0.005]
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub name: String,
    pub env: RnpSpec,
    #[serde(default)]
    pub geometry: RnpGeometry,
    #[serde(default)]
    pub models: Models,
    #[serde(default)]
    pub firm: FirmConfig,
    /// Seed of graph construction and edge evaluation.
    #[serde(default)]
    pub graph_seed: u64,
    pub planners: Vec<PlannerKind>,
    #[serde(default)]
    pub bvl: PlannerConfig,
    #[serde(default)]
    pub urm: PlannerConfig,
    #[serde(default)]
    pub urm_roadmap: UrmConfig,
    #[serde(default)]
    pub ogr: OgrConfig,
    /// Diagonal of the initial belief covariance at the start pose.
    #[serde(default = "default_initial_cov")]
    pub initial_cov: [f64; 3],
    #[serde(default = "default_runs")]
    pub n_runs: usize,
    #[serde(default)]
    pub base_seed: u64,
    #[serde(default = "default_cap")]
    pub step_cap: usize,
    #[serde(default)]
    pub sweep: Option<SweepSpec>,
    /// Write a JSON-lines log per episode.
    #[serde(default = "default_true")]
    pub write_logs: bool,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
}

impl ExperimentConfig {
    pub fn from_json(doc: &str) -> Result<Self, ExperimentError> {
        let cfg: Self = serde_json::from_str(doc).map_err(|e| ExperimentError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ExperimentError> {
        let doc = fs::read_to_string(path).map_err(|e| ExperimentError::Config(format!("{}: {e}", path.display())))?;
        Self::from_json(&doc)
    }

    pub fn validate(&self) -> Result<(), ExperimentError> {
        let bad = |m: &str| Err(ExperimentError::Config(m.to_string()));
        if self.n_runs == 0 {
            return bad("n_runs must be at least 1");
        }
        if self.planners.is_empty() {
            return bad("no planners selected");
        }
        if self.step_cap == 0 || self.step_cap > GLOBAL_STEP_CAP {
            return bad("step_cap must be in 1..=20000");
        }
        if self.initial_cov.iter().any(|v| !(*v >= 0.0) || !v.is_finite()) {
            return bad("initial_cov must be nonnegative");
        }
        for (name, p) in [("bvl", &self.bvl), ("urm", &self.urm)] {
            if p.n_sims == 0 || p.k_neighbors == 0 || !(p.delta_match > 0.0) || !(p.eta_w >= 0.0) {
                return Err(ExperimentError::Config(format!("{name}: n_sims, k_neighbors and delta_match must be positive")));
            }
        }
        if self.firm.n_nodes == 0 || !(self.firm.epsilon > 0.0) || self.firm.n_mc == 0 {
            return bad("firm: n_nodes, epsilon and n_mc must be positive");
        }
        self.models.validate().map_err(|e| ExperimentError::Config(e.to_string()))?;
        Ok(())
    }

    pub fn env_label(&self) -> String {
        format!("{:?}({},{})", self.env.family, self.env.e, self.env.o)
    }

    /// The config of one sweep cell.
    pub fn with_axis(&self, axis: SweepAxis, value: f64) -> Self {
        let mut c = self.clone();
        match axis {
            SweepAxis::ObstacleO => c.env.o = value,
            SweepAxis::FirmNodes => c.firm.n_nodes = value.round() as usize,
        }
        c.sweep = None;
        c
    }
}

/// Environment, graph and roadmap shared by every episode of a batch.
pub struct Prepared {
    pub cfg: ExperimentConfig,
    pub env: Environment,
    pub graph: Option<FirmGraph>,
    pub urm: Option<UrmSetup>,
}

impl Prepared {
    /// Builds whatever the selected planners need; a given graph is used instead of building one.
    pub fn new(cfg: &ExperimentConfig, graph: Option<FirmGraph>) -> Result<Self, ExperimentError> {
        cfg.validate()?;
        let env = generate_rnp_with(&cfg.env, &cfg.geometry)?;
        let needs_graph = cfg.planners.iter().any(|p| p.needs_graph());
        let graph = match graph {
            Some(g) => {
                if g.env_hash != env.hash() {
                    return Err(GraphError::EnvironmentMismatch { found: g.env_hash, expected: env.hash() }.into());
                }
                Some(g)
            }
            None if needs_graph => Some(build_and_solve(&env, &cfg.firm, &cfg.models, cfg.graph_seed)?),
            None => None,
        };
        let urm = if cfg.planners.contains(&PlannerKind::Urm) {
            Some(UrmSetup::new(&env, &cfg.models, &cfg.urm_roadmap, cfg.firm.lqg, cfg.firm.epsilon, cfg.firm.j_fail)?)
        } else {
            None
        };
        Ok(Self { cfg: cfg.clone(), env, graph, urm })
    }

    pub fn initial_belief(&self) -> GaussianBelief {
        GaussianBelief::from_diag(self.env.start, self.cfg.initial_cov).expect("validated covariance")
    }

    /// One episode; panics inside the planner become an `error` outcome.
    pub fn run_episode(&self, planner: PlannerKind, seed: u64) -> EpisodeLog {
        let label = planner.name();
        let hash = self.env.hash();
        let recorder = || {
            let mut r = EpisodeRecorder::new(label, &hash, seed);
            r.keep_steps = self.cfg.write_logs;
            r
        };
        let result = catch_unwind(AssertUnwindSafe(|| self.run_unguarded(planner, seed, recorder())));
        match result {
            Ok(Ok(log)) => log,
            Ok(Err(_)) => recorder().finish(Outcome::Infeasible),
            Err(_) => recorder().finish(Outcome::Error),
        }
    }

    fn run_unguarded(&self, planner: PlannerKind, seed: u64, recorder: EpisodeRecorder) -> Result<EpisodeLog, ExperimentError> {
        let mut rngs = EpisodeRngs::new(seed);
        let b0 = self.initial_belief();
        let x0 = sample_state(&b0, &mut rngs.world);
        let cap = self.cfg.step_cap;
        let graph = || self.graph.as_ref().ok_or_else(|| ExperimentError::Config("planner needs a graph".into()));
        Ok(match planner {
            PlannerKind::Bvl => plan_and_execute(&b0, &x0, graph()?, &self.env, &self.cfg.bvl, &mut rngs, recorder, cap)?,
            PlannerKind::Urm => {
                let setup = self.urm.as_ref().ok_or_else(|| ExperimentError::Config("roadmap missing".into()))?;
                urm_pomcp_plan_and_execute(&b0, &x0, setup, &self.env, &self.cfg.models, &self.cfg.urm, &mut rngs, recorder, cap)?
            }
            PlannerKind::Firm => firm_execute(&b0, &x0, graph()?, &self.env, &mut rngs, recorder, cap)?,
            PlannerKind::Ogr => ogr_execute(&b0, &x0, graph()?, &self.env, &self.cfg.ogr, &mut rngs, recorder, cap)?,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub planner: String,
    pub env: String,
    pub axis: Option<String>,
    pub axis_value: Option<f64>,
    pub seed: u64,
    pub outcome: Outcome,
    pub steps: usize,
    pub total_cost: f64,
    pub sum_trace: f64,
}

impl MetricsRow {
    pub fn from_log(log: &EpisodeLog, env: &str) -> Self {
        Self {
            planner: log.header.planner.clone(),
            env: env.to_string(),
            axis: None,
            axis_value: None,
            seed: log.header.seed,
            outcome: log.summary.outcome,
            steps: log.summary.steps,
            total_cost: log.summary.total_cost,
            sum_trace: log.summary.sum_trace,
        }
    }

    pub fn is_success(&self) -> bool {
        self.outcome == Outcome::Goal
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimingRow {
    pub planner: String,
    pub seed: u64,
    pub wall_time_s: f64,
}

pub struct BatchResult {
    pub rows: Vec<MetricsRow>,
    pub timings: Vec<TimingRow>,
    pub logs: Vec<EpisodeLog>,
}

/// Runs `n_runs` episodes per planner on up to `jobs` threads; results are
/// ordered by (planner, seed).
pub fn run_batch(p: &Prepared, jobs: usize) -> BatchResult {
    let mut tasks: Vec<(PlannerKind, u64)> = Vec::new();
    for &pl in &p.cfg.planners {
        for i in 0..p.cfg.n_runs {
            tasks.push((pl, p.cfg.base_seed + i as u64));
        }
    }
    let results: Mutex<Vec<Option<(EpisodeLog, f64)>>> = Mutex::new(vec![None; tasks.len()]);
    let next = AtomicUsize::new(0);
    let worker = || loop {
        let i = next.fetch_add(1, Ordering::SeqCst);
        if i >= tasks.len() {
            break;
        }
        let (pl, seed) = tasks[i];
        let t = Instant::now();
        let log = p.run_episode(pl, seed);
        let wall = t.elapsed().as_secs_f64();
        results.lock().expect("no poisoned lock")[i] = Some((log, wall));
    };
    let jobs = jobs.clamp(1, tasks.len().max(1));
    if jobs == 1 {
        worker();
    } else {
        std::thread::scope(|s| {
            for _ in 0..jobs {
                s.spawn(worker);
            }
        });
    }
    let env = p.cfg.env_label();
    let mut out: Vec<(PlannerKind, u64, EpisodeLog, f64)> = results
        .into_inner()
        .expect("no poisoned lock")
        .into_iter()
        .zip(&tasks)
        .map(|(r, &(pl, seed))| {
            let (log, wall) = r.expect("every task ran");
            (pl, seed, log, wall)
        })
        .collect();
    out.sort_by(|a, b| (a.0, a.1).cmp(&(b.0, b.1)));
    let mut res = BatchResult { rows: Vec::new(), timings: Vec::new(), logs: Vec::new() };
    for (pl, seed, log, wall) in out {
        res.rows.push(MetricsRow::from_log(&log, &env));
        res.timings.push(TimingRow { planner: pl.name().to_string(), seed, wall_time_s: wall });
        res.logs.push(log);
    }
    res
}

pub fn metrics_csv(rows: &[MetricsRow]) -> Result<Vec<u8>, ExperimentError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)?;
    }
    w.into_inner().map_err(|e| ExperimentError::Io(e.into_error()))
}

pub fn read_metrics_csv(path: &Path) -> Result<Vec<MetricsRow>, ExperimentError> {
    let mut r = csv::Reader::from_path(path)?;
    Ok(r.deserialize().collect::<Result<Vec<MetricsRow>, _>>()?)
}

fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<(), ExperimentError> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

/// Writes metrics.csv, timings.csv, summary.csv and (if enabled) logs/ into `dir`.
pub fn write_batch(dir: &Path, batch: &BatchResult, write_logs: bool) -> Result<(), ExperimentError> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("metrics.csv"), metrics_csv(&batch.rows)?)?;
    write_csv(&dir.join("timings.csv"), &batch.timings)?;
    write_csv(&dir.join("summary.csv"), &summarize(&batch.rows))?;
    if write_logs {
        let logs = dir.join("logs");
        fs::create_dir_all(&logs)?;
        for log in &batch.logs {
            let mut f = fs::File::create(logs.join(format!("{}-{}.jsonl", log.header.planner, log.header.seed)))?;
            f.write_all(log.to_jsonl().as_bytes())?;
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlannerSummary {
    pub planner: String,
    pub axis_value: Option<f64>,
    pub runs: usize,
    pub successes: usize,
    pub collisions: usize,
    pub caps: usize,
    pub collision_probability: f64,
    /// Mean and standard deviation over successful episodes.
    pub mean_cost: Option<f64>,
    pub std_cost: Option<f64>,
    pub mean_steps: Option<f64>,
    pub mean_sum_trace: Option<f64>,
    /// Median steps with failed episodes counted at their step count.
    pub median_steps: f64,
}

fn mean_std(v: &[f64]) -> (Option<f64>, Option<f64>) {
    if v.is_empty() {
        return (None, None);
    }
    let m = v.iter().sum::<f64>() / v.len() as f64;
    let var = if v.len() > 1 { v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64 } else { 0.0 };
    (Some(m), Some(var.sqrt()))
}

pub fn median(v: &[f64]) -> f64 {
    if v.is_empty() {
        return f64::NAN;
    }
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    if n % 2 == 1 { s[n / 2] } else { 0.5 * (s[n / 2 - 1] + s[n / 2]) }
}

fn groups(rows: &[MetricsRow]) -> Vec<((String, Option<f64>), Vec<&MetricsRow>)> {
    let mut out: Vec<((String, Option<f64>), Vec<&MetricsRow>)> = Vec::new();
    for r in rows {
        let key = (r.planner.clone(), r.axis_value);
        match out.iter_mut().find(|(k, _)| *k == key) {
            Some((_, v)) => v.push(r),
            None => out.push((key, vec![r])),
        }
    }
    out
}

/// Per planner (and sweep value) statistics.
pub fn summarize(rows: &[MetricsRow]) -> Vec<PlannerSummary> {
    groups(rows)
        .into_iter()
        .map(|((planner, axis_value), rs)| {
            let ok: Vec<&&MetricsRow> = rs.iter().filter(|r| r.is_success()).collect();
            let (mean_cost, std_cost) = mean_std(&ok.iter().map(|r| r.total_cost).collect::<Vec<_>>());
            let (mean_steps, _) = mean_std(&ok.iter().map(|r| r.steps as f64).collect::<Vec<_>>());
            let (mean_sum_trace, _) = mean_std(&ok.iter().map(|r| r.sum_trace).collect::<Vec<_>>());
            let collisions = rs.iter().filter(|r| r.outcome == Outcome::Collision).count();
            PlannerSummary {
                planner,
                axis_value,
                runs: rs.len(),
                successes: ok.len(),
                collisions,
                caps: rs.iter().filter(|r| r.outcome == Outcome::Cap).count(),
                collision_probability: collisions as f64 / rs.len() as f64,
                mean_cost,
                std_cost,
                mean_steps,
                mean_sum_trace,
                median_steps: median(&rs.iter().map(|r| r.steps as f64).collect::<Vec<_>>()),
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRow {
    pub planner: String,
    pub safety: f64,
    pub optimality: f64,
    /// The planner never reached the goal, so its optimality is 0 by convention.
    pub no_successes: bool,
}

/// Safety = 1 − failure probability (collisions, cap-outs and other
/// non-goal outcomes); optimality = the best planner's mean successful cost
/// over this planner's.
pub fn compute_scores(rows: &[MetricsRow]) -> Result<Vec<ScoreRow>, ExperimentError> {
    if rows.is_empty() {
        return Err(ExperimentError::Config("no metrics rows".into()));
    }
    let mut per: Vec<(String, f64, Option<f64>)> = Vec::new();
    for r in rows {
        if !per.iter().any(|(p, _, _)| *p == r.planner) {
            let rs: Vec<&MetricsRow> = rows.iter().filter(|x| x.planner == r.planner).collect();
            let failures = rs.iter().filter(|x| !x.is_success()).count();
            let costs: Vec<f64> = rs.iter().filter(|x| x.is_success()).map(|x| x.total_cost).collect();
            per.push((r.planner.clone(), 1.0 - failures as f64 / rs.len() as f64, mean_std(&costs).0));
        }
    }
    let best = per.iter().filter_map(|(_, _, c)| *c).fold(f64::INFINITY, f64::min);
    Ok(per
        .into_iter()
        .map(|(planner, safety, cost)| {
            let optimality = match cost {
                Some(c) if c > 0.0 => (best / c).clamp(0.0, 1.0),
                Some(_) => 1.0,
                None => 0.0,
            };
            ScoreRow { planner, safety: safety.clamp(0.0, 1.0), optimality, no_successes: cost.is_none() }
        })
        .collect())
}

pub fn write_scores(path: &Path, scores: &[ScoreRow]) -> Result<(), ExperimentError> {
    write_csv(path, scores)
}

/// Runs one batch per axis value; rows carry the axis name and value.
pub fn run_sweep(cfg: &ExperimentConfig, axis: SweepAxis, values: &[f64], jobs: usize, out: Option<&Path>) -> Result<Vec<MetricsRow>, ExperimentError> {
    if values.is_empty() {
        return Err(ExperimentError::Config("sweep has no values".into()));
    }
    let mut rows = Vec::new();
    for &v in values {
        let cell = cfg.with_axis(axis, v);
        let prepared = match Prepared::new(&cell, None) {
            Ok(p) => p,
            Err(e) if e.is_infeasible() => {
                eprintln!("{}={v}: {e}", axis.name());
                continue;
            }
            Err(e) => return Err(e),
        };
        let mut batch = run_batch(&prepared, jobs);
        for r in &mut batch.rows {
            r.axis = Some(axis.name().to_string());
            r.axis_value = Some(v);
        }
        if let Some(dir) = out {
            write_batch(&dir.join(format!("{}={v}", axis.name())), &batch, cell.write_logs)?;
        }
        rows.extend(batch.rows);
    }
    if let Some(dir) = out {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("sweep.csv"), metrics_csv(&rows)?)?;
        write_csv(&dir.join("summary.csv"), &summarize(&rows))?;
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::world::RnpFamily;

    fn row(planner: &str, outcome: Outcome, cost: f64) -> MetricsRow {
        MetricsRow {
            planner: planner.into(),
            env: "x".into(),
            axis: None,
            axis_value: None,
            seed: 0,
            outcome,
            steps: 10,
            total_cost: cost,
            sum_trace: 0.1,
        }
    }

    #[test]
    fn single_planner_is_optimal() {
        let s = compute_scores(&[row("a", Outcome::Goal, 5.0), row("a", Outcome::Goal, 7.0)]).unwrap();
        assert_eq!(s[0].optimality, 1.0);
        assert_eq!(s[0].safety, 1.0);
    }

    #[test]
    fn collision_probability_sets_safety() {
        let mut rows: Vec<MetricsRow> = (0..7).map(|_| row("a", Outcome::Goal, 1.0)).collect();
        rows.extend((0..3).map(|_| row("a", Outcome::Collision, 1.0)));
        let s = compute_scores(&rows).unwrap();
        assert!((s[0].safety - 0.7).abs() < 1e-12);
    }

    #[test]
    fn best_cost_planner_gets_one() {
        let rows = vec![row("a", Outcome::Goal, 4.0), row("b", Outcome::Goal, 8.0), row("c", Outcome::Collision, 1.0)];
        let s = compute_scores(&rows).unwrap();
        assert_eq!(s[0].optimality, 1.0);
        assert_eq!(s[1].optimality, 0.5);
        assert_eq!(s[2].optimality, 0.0);
        assert!(s[2].no_successes);
        assert!(s.iter().all(|r| (0.0..=1.0).contains(&r.safety) && (0.0..=1.0).contains(&r.optimality)));
    }

    #[test]
    fn empty_metrics_are_rejected() {
        assert!(compute_scores(&[]).is_err());
    }

    #[test]
    fn summaries_use_successes_only() {
        let rows = vec![row("a", Outcome::Goal, 4.0), row("a", Outcome::Goal, 6.0), row("a", Outcome::Collision, 100.0)];
        let s = summarize(&rows);
        assert_eq!(s[0].mean_cost, Some(5.0));
        assert!((s[0].collision_probability - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn config_validation() {
        let doc = r#"{"env": {"family": "InfoTrap", "e": 10, "o": 3}, "planners": ["bvl"], "n_runs": 0}"#;
        assert!(matches!(ExperimentConfig::from_json(doc), Err(ExperimentError::Config(_))));
        let doc = r#"{"env": {"family": "InfoTrap", "e": 10, "o": 3}, "planners": ["bvl", "urm"]}"#;
        let c = ExperimentConfig::from_json(doc).unwrap();
        assert_eq!(c.n_runs, 20);
        assert_eq!(c.env.family, RnpFamily::InfoTrap);
        assert_eq!(c.with_axis(SweepAxis::FirmNodes, 350.0).firm.n_nodes, 350);
    }

    #[test]
    fn csv_round_trip() {
        let mut r = row("bvl", Outcome::Cap, 1.0 / 3.0);
        r.axis = Some("obstacle_o".into());
        r.axis_value = Some(13.0);
        let bytes = metrics_csv(&[r.clone(), row("urm", Outcome::Goal, 2.5)]).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.csv");
        fs::write(&path, &bytes).unwrap();
        assert_eq!(read_metrics_csv(&path).unwrap(), vec![r, row("urm", Outcome::Goal, 2.5)]);
    }

    #[test]
    fn median_examples() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
    }
}
