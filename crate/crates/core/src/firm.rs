//! Offline belief roadmap: node sampling, edge controllers, Monte Carlo edge
//! evaluation and undiscounted value iteration.

use std::path::Path;
use std::sync::OnceLock;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::beliefs::{belief_distance, is_in_node, GaussianBelief, State};
use crate::controllers::{
    make_edge_controller, make_node_controller, tracking_gain, ControlError, DareSolution, EdgeController,
    LqgWeights, StationaryLqg,
};
use crate::models::Models;
use crate::simulation::{sample_state, track_to_node, TrackOutcome};
use crate::world::{Environment, WorldError};

pub const GRAPH_SCHEMA_VERSION: u32 = 1;
pub const VI_TOL: f64 = 1e-9;
pub const VI_MAX_SWEEPS: usize = 100_000;

#[derive(Debug, Error)]
pub enum GraphError {
    #[error("goal node: {0}")]
    Goal(ControlError),
    #[error(transparent)]
    World(#[from] WorldError),
    #[error(transparent)]
    Control(#[from] ControlError),
    #[error("could only place {placed} of {wanted} nodes after {attempts} attempts")]
    TooFewNodes { placed: usize, wanted: usize, attempts: usize },
    #[error("graph schema version {found}, expected {expected}")]
    Schema { found: u64, expected: u32 },
    #[error("graph was built for environment {found}, not {expected}")]
    EnvironmentMismatch { found: String, expected: String },
    #[error("malformed graph document: {0}")]
    Parse(String),
    #[error("{0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FirmConfig {
    /// Including the goal node.
    pub n_nodes: usize,
    pub epsilon: f64,
    pub connect_radius: f64,
    /// Keep only the nearest targets per node (all within `connect_radius` when unset).
    pub max_neighbors: Option<usize>,
    pub n_mc: usize,
    /// Steps allowed after the nominal trajectory ends.
    pub stabilization_cap: usize,
    pub j_fail: f64,
    pub lqg: LqgWeights,
    /// Extra distance nodes and nominal edges keep from obstacles, on top
    /// of the robot radius. Execution still collides at the robot radius.
    pub clearance: f64,
    /// Give every sampled node the goal heading, so edges are pure translations.
    pub align_node_headings: bool,
    /// Sampling attempts per requested node before giving up.
    pub attempts_per_node: usize,
}

impl Default for FirmConfig {
    fn default() -> Self {
        Self {
            n_nodes: 100,
            epsilon: 0.25,
            connect_radius: 4.0,
            max_neighbors: None,
            n_mc: 25,
            stabilization_cap: 400,
            j_fail: 1e6,
            lqg: LqgWeights::default(),
            clearance: 0.0,
            align_node_headings: true,
            attempts_per_node: 200,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FirmNode {
    pub id: usize,
    pub center: GaussianBelief,
    pub epsilon: f64,
    pub controller: StationaryLqg,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FirmEdge {
    pub id: usize,
    pub from: usize,
    pub to: usize,
    pub controller: EdgeController,
    pub cost: f64,
    pub p_success: f64,
    pub p_fail: f64,
    pub mc_samples: usize,
}

/// Outcome of Monte Carlo edge evaluation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EdgeEvaluation {
    pub cost: f64,
    pub p_success: f64,
    pub p_fail: f64,
    pub samples: usize,
}

/// Planning-relevant summary of an edge.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EdgeStats {
    pub from: usize,
    pub to: usize,
    pub cost: f64,
    pub p_success: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ValueSolution {
    pub j: Vec<f64>,
    pub policy: Vec<Option<usize>>,
    pub sweeps: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FirmGraph {
    pub config: FirmConfig,
    pub models: Models,
    pub env_hash: String,
    pub goal: usize,
    pub nodes: Vec<FirmNode>,
    pub edges: Vec<FirmEdge>,
    pub out_edges: Vec<Vec<usize>>,
    pub j_fail: f64,
    pub j: Vec<f64>,
    pub policy: Vec<Option<usize>>,
    #[serde(skip)]
    index: OnceLock<NodeIndex>,
}

#[derive(Serialize, Deserialize)]
struct GraphDocument {
    schema_version: u32,
    env_hash: String,
    graph: FirmGraph,
}

impl FirmGraph {
    pub fn node(&self, id: usize) -> &FirmNode {
        &self.nodes[id]
    }

    pub fn edge(&self, id: usize) -> &FirmEdge {
        &self.edges[id]
    }

    pub fn goal_center(&self) -> &GaussianBelief {
        &self.nodes[self.goal].center
    }

    pub fn in_node(&self, b: &GaussianBelief, node: usize) -> bool {
        let n = &self.nodes[node];
        is_in_node(b, &n.center, n.epsilon, &self.models.metric)
    }

    pub fn in_goal(&self, b: &GaussianBelief) -> bool {
        self.in_node(b, self.goal)
    }

    /// Steps an edge may run before it is declared failed.
    pub fn edge_step_cap(&self, edge: usize) -> usize {
        self.edges[edge].controller.n_steps + self.config.stabilization_cap
    }

    pub fn edge_stats(&self) -> Vec<EdgeStats> {
        self.edges
            .iter()
            .map(|e| EdgeStats { from: e.from, to: e.to, cost: e.cost, p_success: e.p_success })
            .collect()
    }

    /// Runs value iteration and stores J and the policy.
    pub fn solve(&mut self) {
        let sol = value_iteration(self.nodes.len(), self.goal, &self.edge_stats(), self.j_fail);
        self.j = sol.j;
        self.policy = sol.policy;
    }

    /// Max Bellman residual of the stored J.
    pub fn bellman_residual(&self) -> f64 {
        bellman_residual(self.nodes.len(), self.goal, &self.edge_stats(), &self.j, self.j_fail)
    }

    fn index(&self) -> &NodeIndex {
        self.index.get_or_init(|| NodeIndex::new(&self.nodes))
    }

    /// Up to `k` nodes nearest to `b` in belief distance whose straight segment
    /// from `b.mean` is free with the graph's clearance, nearest first (ties by id).
    pub fn neighbors_of_belief(&self, env: &Environment, b: &GaussianBelief, k: usize) -> Vec<(usize, f64)> {
        self.index().query(self, env, b, k)
    }

    pub fn to_json(&self) -> String {
        let doc = GraphDocument { schema_version: GRAPH_SCHEMA_VERSION, env_hash: self.env_hash.clone(), graph: self.clone() };
        serde_json::to_string(&doc).expect("graph serializes")
    }

    pub fn from_json(doc: &str) -> Result<Self, GraphError> {
        let value: serde_json::Value = serde_json::from_str(doc).map_err(|e| GraphError::Parse(e.to_string()))?;
        let found = value.get("schema_version").and_then(|v| v.as_u64()).ok_or_else(|| GraphError::Parse("missing schema_version".into()))?;
        if found != GRAPH_SCHEMA_VERSION as u64 {
            return Err(GraphError::Schema { found, expected: GRAPH_SCHEMA_VERSION });
        }
        let doc: GraphDocument = serde_json::from_value(value).map_err(|e| GraphError::Parse(e.to_string()))?;
        let g = doc.graph;
        if g.env_hash != doc.env_hash {
            return Err(GraphError::Parse("environment hash mismatch inside document".into()));
        }
        Ok(g)
    }

    pub fn save(&self, path: &Path) -> Result<(), GraphError> {
        std::fs::write(path, self.to_json())?;
        Ok(())
    }

    /// Loads a graph and checks that it was built for `env`.
    pub fn load(path: &Path, env: &Environment) -> Result<Self, GraphError> {
        let g = Self::from_json(&std::fs::read_to_string(path)?)?;
        let expected = env.hash();
        if g.env_hash != expected {
            return Err(GraphError::EnvironmentMismatch { found: g.env_hash, expected });
        }
        Ok(g)
    }
}

/// Uniform bucket grid over node positions.
#[derive(Debug, Clone)]
struct NodeIndex {
    cell: f64,
    x0: f64,
    y0: f64,
    nx: usize,
    ny: usize,
    buckets: Vec<Vec<usize>>,
}

impl NodeIndex {
    fn new(nodes: &[FirmNode]) -> Self {
        let cell = 1.0;
        let (mut x0, mut y0, mut x1, mut y1) = (f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY);
        for n in nodes {
            x0 = x0.min(n.center.mean.x);
            y0 = y0.min(n.center.mean.y);
            x1 = x1.max(n.center.mean.x);
            y1 = y1.max(n.center.mean.y);
        }
        if nodes.is_empty() {
            (x0, y0, x1, y1) = (0.0, 0.0, 0.0, 0.0);
        }
        let nx = ((x1 - x0) / cell).floor() as usize + 1;
        let ny = ((y1 - y0) / cell).floor() as usize + 1;
        let mut buckets = vec![Vec::new(); nx * ny];
        let mut idx = Self { cell, x0, y0, nx, ny, buckets: Vec::new() };
        for n in nodes {
            let (i, j) = idx.cell_of(n.center.mean.x, n.center.mean.y);
            buckets[j * nx + i].push(n.id);
        }
        idx.buckets = buckets;
        idx
    }

    fn cell_of(&self, x: f64, y: f64) -> (usize, usize) {
        let c = |v: f64, o: f64, n: usize| (((v - o) / self.cell).floor().max(0.0) as usize).min(n - 1);
        (c(x, self.x0, self.nx), c(y, self.y0, self.ny))
    }

    fn query(&self, g: &FirmGraph, env: &Environment, b: &GaussianBelief, k: usize) -> Vec<(usize, f64)> {
        let mut out = Vec::new();
        if k == 0 || g.nodes.is_empty() {
            return out;
        }
        let metric = &g.models.metric;
        let wmin = metric.w_x.min(metric.w_y);
        // distance from the query point to the outside of its cell, clamped to the grid
        let (qi, qj) = self.cell_of(b.mean.x, b.mean.y);
        let cx = self.x0 + qi as f64 * self.cell;
        let cy = self.y0 + qj as f64 * self.cell;
        let inner = (b.mean.x - cx).min(cx + self.cell - b.mean.x).min(b.mean.y - cy).min(cy + self.cell - b.mean.y).max(0.0);
        let max_ring = self.nx.max(self.ny);
        let mut pending: Vec<(f64, usize)> = Vec::new();
        for r in 0..=max_ring {
            self.visit_ring(qi, qj, r, |id| {
                pending.push((belief_distance(b, &g.nodes[id].center, metric), id));
            });
            // nodes in rings beyond r are at least this far in position
            let bound = if r >= max_ring { f64::INFINITY } else { wmin * (inner + r as f64 * self.cell) };
            pending.sort_by(|a, c| a.0.total_cmp(&c.0).then(a.1.cmp(&c.1)));
            let mut taken = 0;
            for &(d, id) in &pending {
                if d > bound {
                    break;
                }
                taken += 1;
                let m = &g.nodes[id].center.mean;
                if !env.collides_with_margin(&b.mean, m, g.config.clearance) {
                    out.push((id, d));
                    if out.len() == k {
                        return out;
                    }
                }
            }
            pending.drain(..taken);
        }
        out
    }

    fn visit_ring(&self, qi: usize, qj: usize, r: usize, mut f: impl FnMut(usize)) {
        let (qi, qj, r) = (qi as isize, qj as isize, r as isize);
        let mut cell = |i: isize, j: isize| {
            if i >= 0 && j >= 0 && (i as usize) < self.nx && (j as usize) < self.ny {
                for &id in &self.buckets[j as usize * self.nx + i as usize] {
                    f(id);
                }
            }
        };
        if r == 0 {
            cell(qi, qj);
            return;
        }
        for i in (qi - r)..=(qi + r) {
            cell(i, qj - r);
            cell(i, qj + r);
        }
        for j in (qj - r + 1)..=(qj + r - 1) {
            cell(qi - r, j);
            cell(qi + r, j);
        }
    }
}

/// Samples nodes and synthesizes controllers; edges are left unevaluated.
pub fn build_graph(env: &Environment, cfg: &FirmConfig, models: &Models, seed: u64) -> Result<FirmGraph, GraphError> {
    let dare = tracking_gain(&models.motion, &cfg.lqg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let roomy = env.with_clearance(cfg.clearance);
    let make_node = |id: usize, v: &State| -> Result<FirmNode, ControlError> {
        let controller = make_node_controller(v, env, &models.motion, &models.observation, &dare)?;
        Ok(FirmNode { id, center: controller.center(), epsilon: cfg.epsilon, controller })
    };
    let mut nodes = vec![make_node(0, &env.goal).map_err(GraphError::Goal)?];
    let wanted = cfg.n_nodes.max(1);
    let max_attempts = cfg.attempts_per_node * wanted;
    let mut attempts = 0;
    while nodes.len() < wanted {
        if attempts >= max_attempts {
            return Err(GraphError::TooFewNodes { placed: nodes.len(), wanted, attempts });
        }
        attempts += 1;
        let mut v = roomy.sample_free_state(&mut rng)?;
        if cfg.align_node_headings {
            v.theta = env.goal.theta;
        }
        match make_node(nodes.len(), &v) {
            Ok(n) => nodes.push(n),
            Err(ControlError::FilterNotConverged { .. }) => continue,
            Err(e) => return Err(e.into()),
        }
    }
    let edges = connect_nodes(&nodes, &roomy, cfg, models, &dare);
    let mut out_edges = vec![Vec::new(); nodes.len()];
    for e in &edges {
        out_edges[e.from].push(e.id);
    }
    let n = nodes.len();
    Ok(FirmGraph {
        config: *cfg,
        models: *models,
        env_hash: env.hash(),
        goal: 0,
        nodes,
        edges,
        out_edges,
        j_fail: cfg.j_fail,
        j: (0..n).map(|i| if i == 0 { 0.0 } else { cfg.j_fail }).collect(),
        policy: vec![None; n],
        index: OnceLock::new(),
    })
}

fn connect_nodes(nodes: &[FirmNode], env: &Environment, cfg: &FirmConfig, models: &Models, dare: &DareSolution) -> Vec<FirmEdge> {
    let mut edges = Vec::new();
    for a in nodes.iter().skip(1) {
        let va = a.center.mean;
        let mut targets: Vec<(f64, usize)> = nodes
            .iter()
            .filter(|b| b.id != a.id)
            .map(|b| (va.position_distance(&b.center.mean), b.id))
            .filter(|(d, _)| *d <= cfg.connect_radius)
            .collect();
        targets.sort_by(|x, y| x.0.total_cmp(&y.0).then(x.1.cmp(&y.1)));
        let mut kept = 0;
        for (_, to) in targets {
            if cfg.max_neighbors.is_some_and(|m| kept >= m) {
                break;
            }
            let Ok(controller) = make_edge_controller(&va, &nodes[to].center.mean, env, &models.motion, dare) else {
                continue;
            };
            kept += 1;
            edges.push(FirmEdge {
                id: edges.len(),
                from: a.id,
                to,
                controller,
                cost: 0.0,
                p_success: 0.0,
                p_fail: 1.0,
                mc_samples: 0,
            });
        }
    }
    edges
}

/// Monte Carlo estimate of an edge's cost and success probability.
pub fn evaluate_edge<R: Rng + ?Sized>(graph: &FirmGraph, edge: usize, n_mc: usize, rng: &mut R, env: &Environment) -> EdgeEvaluation {
    let e = &graph.edges[edge];
    let start = graph.nodes[e.from].center;
    let target = &graph.nodes[e.to];
    let cap = graph.edge_step_cap(edge);
    let (mut successes, mut success_cost, mut all_cost) = (0usize, 0.0, 0.0);
    for _ in 0..n_mc {
        let x0 = sample_state(&start, rng);
        let r = track_to_node(&e.controller, 0, &target.center, target.epsilon, &x0, &start, cap, env, &graph.models, rng, |_, _| {});
        all_cost += r.cost;
        if r.outcome == TrackOutcome::Reached {
            successes += 1;
            success_cost += r.cost;
        }
    }
    let n = n_mc.max(1) as f64;
    let cost = if successes > 0 { success_cost / successes as f64 } else { all_cost / n };
    let p_success = successes as f64 / n;
    EdgeEvaluation { cost, p_success, p_fail: 1.0 - p_success, samples: n_mc }
}

/// Per-edge random stream: the edge id selects the stream of a seed shared by all edges.
pub fn edge_rng(seed: u64, edge: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(edge as u64);
    rng
}

pub fn evaluate_edges(graph: &mut FirmGraph, env: &Environment, seed: u64) {
    let n_mc = graph.config.n_mc;
    for id in 0..graph.edges.len() {
        let mut rng = edge_rng(seed, id);
        let ev = evaluate_edge(graph, id, n_mc, &mut rng, env);
        let e = &mut graph.edges[id];
        e.cost = ev.cost;
        e.p_success = ev.p_success;
        e.p_fail = ev.p_fail;
        e.mc_samples = ev.samples;
    }
}

/// Full offline phase: sample, connect, evaluate, value-iterate.
pub fn build_and_solve(env: &Environment, cfg: &FirmConfig, models: &Models, seed: u64) -> Result<FirmGraph, GraphError> {
    let mut g = build_graph(env, cfg, models, seed)?;
    evaluate_edges(&mut g, env, seed ^ 0x9e37_79b9_7f4a_7c15);
    g.solve();
    Ok(g)
}

fn q_value(e: &EdgeStats, j: &[f64], j_fail: f64) -> f64 {
    e.cost + e.p_success * j[e.to] + (1.0 - e.p_success) * j_fail
}

fn out_lists(n: usize, edges: &[EdgeStats]) -> Vec<Vec<usize>> {
    let mut out = vec![Vec::new(); n];
    for (i, e) in edges.iter().enumerate() {
        out[e.from].push(i);
    }
    out
}

/// Greedy edge per node: lowest Q, ties to the lowest edge id; `None` when
/// nothing beats failing.
fn greedy(n: usize, goal: usize, out: &[Vec<usize>], edges: &[EdgeStats], j: &[f64], j_fail: f64) -> Vec<Option<usize>> {
    (0..n)
        .map(|i| {
            if i == goal {
                return None;
            }
            let mut best: Option<(f64, usize)> = None;
            for &e in &out[i] {
                let q = q_value(&edges[e], j, j_fail);
                if best.is_none_or(|(bq, _)| q < bq) {
                    best = Some((q, e));
                }
            }
            best.filter(|(q, _)| *q < j_fail).map(|(_, e)| e)
        })
        .collect()
}

/// Exact cost of a graph policy; nodes that cannot reach the goal, or whose
/// cost exceeds `j_fail`, get `j_fail` and lose their edge.
fn evaluate_graph_policy(n: usize, goal: usize, edges: &[EdgeStats], policy: &mut [Option<usize>], j_fail: f64) -> Vec<f64> {
    loop {
        // nodes whose policy chain reaches the goal with positive probability
        let mut reaches = vec![false; n];
        reaches[goal] = true;
        let mut changed = true;
        while changed {
            changed = false;
            for i in 0..n {
                if let Some(e) = policy[i] {
                    if !reaches[i] && edges[e].p_success > 0.0 && reaches[edges[e].to] {
                        reaches[i] = true;
                        changed = true;
                    }
                }
            }
        }
        let active: Vec<usize> = (0..n).filter(|&i| i != goal && reaches[i]).collect();
        let mut pos = vec![usize::MAX; n];
        for (k, &i) in active.iter().enumerate() {
            pos[i] = k;
        }
        let m = active.len();
        let mut a = DMatrix::<f64>::identity(m, m);
        let mut rhs = DVector::<f64>::zeros(m);
        for (k, &i) in active.iter().enumerate() {
            let e = &edges[policy[i].expect("active nodes have an edge")];
            rhs[k] = e.cost + (1.0 - e.p_success) * j_fail;
            let to = e.to;
            if to == goal {
            } else if pos[to] != usize::MAX {
                a[(k, pos[to])] -= e.p_success;
            } else {
                rhs[k] += e.p_success * j_fail;
            }
        }
        let sol = if m == 0 { Some(rhs) } else { a.lu().solve(&rhs) };
        let mut j = vec![j_fail; n];
        j[goal] = 0.0;
        let mut dropped = false;
        for i in 0..n {
            if i == goal {
                continue;
            }
            if pos[i] == usize::MAX {
                policy[i] = None;
                continue;
            }
            let v = sol.as_ref().map(|s| s[pos[i]]).unwrap_or(f64::INFINITY);
            if v.is_finite() && v < j_fail {
                j[i] = v;
            } else {
                policy[i] = None;
                dropped = true;
            }
        }
        if !dropped {
            return j;
        }
    }
}

/// Undiscounted value iteration with an absorbing goal and a failure cost
/// `j_fail`; every node may also settle for `j_fail`. Gauss-Seidel sweeps
/// from above are followed by exact policy evaluation and improvement.
pub fn value_iteration(n: usize, goal: usize, edges: &[EdgeStats], j_fail: f64) -> ValueSolution {
    let out = out_lists(n, edges);
    let mut j = vec![j_fail; n];
    j[goal] = 0.0;
    let mut sweeps = 0;
    while sweeps < VI_MAX_SWEEPS {
        sweeps += 1;
        let mut delta: f64 = 0.0;
        for i in 0..n {
            if i == goal {
                continue;
            }
            let v = out[i].iter().map(|&e| q_value(&edges[e], &j, j_fail)).fold(j_fail, f64::min);
            delta = delta.max((v - j[i]).abs());
            j[i] = v;
        }
        if delta < VI_TOL {
            break;
        }
    }
    let mut policy = greedy(n, goal, &out, edges, &j, j_fail);
    for _ in 0..100 {
        let mut p = policy.clone();
        j = evaluate_graph_policy(n, goal, edges, &mut p, j_fail);
        let next = greedy(n, goal, &out, edges, &j, j_fail);
        // switch only where the new edge is better beyond rounding
        let improved: Vec<Option<usize>> = (0..n)
            .map(|i| match (next[i], p[i]) {
                (Some(a), Some(b)) if a != b => {
                    let (qa, qb) = (q_value(&edges[a], &j, j_fail), q_value(&edges[b], &j, j_fail));
                    if qa < qb - 1e-12 * qb.abs().max(1.0) { Some(a) } else { Some(b) }
                }
                _ => next[i],
            })
            .collect();
        policy = improved;
        if policy == p {
            break;
        }
    }
    ValueSolution { j, policy, sweeps }
}

pub fn bellman_residual(n: usize, goal: usize, edges: &[EdgeStats], j: &[f64], j_fail: f64) -> f64 {
    let out = out_lists(n, edges);
    (0..n)
        .filter(|&i| i != goal)
        .map(|i| {
            let v = out[i].iter().map(|&e| q_value(&edges[e], j, j_fail)).fold(j_fail, f64::min);
            (v - j[i]).abs()
        })
        .fold(0.0, f64::max)
}
