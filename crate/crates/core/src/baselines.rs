//! Comparison planners: forward search over a uniform roadmap with a
//! straight-line heuristic, one-step graph rollout, and plain graph policy
//! execution.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::beliefs::{belief_distance, Control, CostWeights, GaussianBelief, Mat3, State};
use crate::bvl::{run_tree_planner, NavigationDomain, PlannerConfig};
use crate::controllers::{edge_controller_unchecked, make_node_controller, tracking_gain, ControlError, DareSolution, LqgWeights};
use crate::episode::{EpisodeLog, EpisodeRecorder, EpisodeRngs, Outcome};
use crate::firm::FirmGraph;
use crate::models::Models;
use crate::simulation::{sample_state, simulate_step, track_to_node, TrackOutcome};
use crate::world::Environment;

/// Regular grid of collision-free target poses, plus the goal pose.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UniformRoadmap {
    pub spacing: f64,
    /// Extra obstacle distance kept by targets and by segments toward them.
    pub clearance: f64,
    pub targets: Vec<State>,
}

impl UniformRoadmap {
    /// Grid points at `spacing` inside the free bounds, on lines through the
    /// goal; every target faces the goal heading.
    pub fn new(env: &Environment, spacing: f64, clearance: f64) -> Self {
        assert!(spacing > 0.0, "grid spacing must be positive");
        let fb = env.free_bounds();
        let g = env.goal;
        let range = |lo: f64, hi: f64, at: f64| ((lo - at) / spacing).ceil() as i64..=((hi - at) / spacing).floor() as i64;
        let mut targets = Vec::new();
        for j in range(fb.ymin, fb.ymax, g.y) {
            for i in range(fb.xmin, fb.xmax, g.x) {
                let s = State::new(g.x + i as f64 * spacing, g.y + j as f64 * spacing, g.theta);
                if (i, j) != (0, 0) && !env.with_clearance(clearance).collides(&s, None) {
                    targets.push(s);
                }
            }
        }
        targets.push(g);
        Self { spacing, clearance, targets }
    }

    /// Target nearest to `x` in position (ties by index).
    pub fn nearest(&self, x: &State) -> Option<usize> {
        self.targets
            .iter()
            .enumerate()
            .min_by(|(i, a), (j, b)| a.position_distance(x).total_cmp(&b.position_distance(x)).then(i.cmp(j)))
            .map(|(i, _)| i)
    }

    /// Up to `k` targets nearest to `x` reachable along a collision-free segment.
    pub fn neighbors(&self, env: &Environment, x: &State, k: usize) -> Vec<usize> {
        let mut order: Vec<(f64, usize)> = self.targets.iter().enumerate().map(|(i, t)| (t.position_distance(x), i)).collect();
        order.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        order
            .into_iter()
            .filter(|&(_, i)| !env.collides_with_margin(x, &self.targets[i], self.clearance))
            .take(k)
            .map(|(_, i)| i)
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HeuristicParams {
    /// Maximum speed assumed by the heuristic.
    pub v_max: f64,
    pub weights: CostWeights,
    /// Covariance the per-step cost is priced at.
    pub p_c_ref: Mat3,
}

impl HeuristicParams {
    pub fn step_cost(&self) -> f64 {
        self.weights.xi_p * self.p_c_ref.trace() + self.weights.xi_t * self.weights.dt
    }
}

/// Straight-line time to the goal times the per-step cost at the reference covariance.
pub fn urm_heuristic(b: &GaussianBelief, goal: &State, p: &HeuristicParams) -> f64 {
    b.mean.position_distance(goal) / (p.v_max * p.weights.dt) * p.step_cost()
}

/// Everything the roadmap search needs besides the planner budget.
#[derive(Debug, Clone, PartialEq)]
pub struct UrmSetup {
    pub roadmap: UniformRoadmap,
    pub heuristic: HeuristicParams,
    pub stay_penalty: f64,
    pub goal_epsilon: f64,
    pub j_fail: f64,
    pub lqg: LqgWeights,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct UrmConfig {
    pub spacing: f64,
    /// Stay penalty in units of the typical step cost.
    pub stay_penalty_factor: f64,
    /// Obstacle clearance of the grid, as for graph nodes.
    pub clearance: f64,
}

impl Default for UrmConfig {
    fn default() -> Self {
        Self { spacing: 1.0, stay_penalty_factor: 2.0, clearance: 0.0 }
    }
}

impl UrmSetup {
    /// The goal's stationary covariance is the heuristic's reference
    /// covariance and the center of the goal ball.
    pub fn new(
        env: &Environment,
        models: &Models,
        cfg: &UrmConfig,
        lqg: LqgWeights,
        goal_epsilon: f64,
        j_fail: f64,
    ) -> Result<Self, ControlError> {
        let dare = tracking_gain(&models.motion, &lqg)?;
        let goal = make_node_controller(&env.goal, env, &models.motion, &models.observation, &dare)?;
        let heuristic = HeuristicParams { v_max: models.motion.v_max, weights: models.cost, p_c_ref: goal.p_c };
        Ok(Self {
            roadmap: UniformRoadmap::new(env, cfg.spacing, cfg.clearance),
            heuristic,
            stay_penalty: cfg.stay_penalty_factor * heuristic.step_cost(),
            goal_epsilon,
            j_fail,
            lqg,
        })
    }

    pub fn domain<'a>(&'a self, env: &'a Environment, models: &Models, cfg: PlannerConfig) -> Result<NavigationDomain<'a>, ControlError> {
        NavigationDomain::for_roadmap(
            env,
            &self.roadmap,
            *models,
            self.lqg,
            self.heuristic,
            self.stay_penalty,
            self.goal_epsilon,
            self.j_fail,
            cfg,
        )
    }
}

/// Roadmap-guided tree search with Monte Carlo backups.
#[allow(clippy::too_many_arguments)]
pub fn urm_pomcp_plan_and_execute(
    b0: &GaussianBelief,
    x0: &State,
    setup: &UrmSetup,
    env: &Environment,
    models: &Models,
    cfg: &PlannerConfig,
    rngs: &mut EpisodeRngs,
    recorder: EpisodeRecorder,
    cap: usize,
) -> Result<EpisodeLog, ControlError> {
    let domain = setup.domain(env, models, *cfg)?;
    Ok(run_tree_planner(&domain, b0, x0, rngs, recorder, cap))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OgrConfig {
    pub k_neighbors: usize,
    /// Traversals simulated per candidate.
    pub n_og: usize,
}

impl Default for OgrConfig {
    fn default() -> Self {
        Self { k_neighbors: 5, n_og: 20 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OgrCandidate {
    pub target: usize,
    pub score: f64,
    pub mean_cost: f64,
    pub p_success: f64,
}

/// Scores every candidate node by simulated traversals from `b` and
/// returns them in candidate order together with the argmin index.
pub fn ogr_scores<R: Rng + ?Sized>(
    b: &GaussianBelief,
    graph: &FirmGraph,
    env: &Environment,
    cfg: &OgrConfig,
    rng: &mut R,
) -> Result<(Vec<OgrCandidate>, Option<usize>), ControlError> {
    let dare = tracking_gain(&graph.models.motion, &graph.config.lqg)?;
    let mut out = Vec::new();
    for (j, _) in graph.neighbors_of_belief(env, b, cfg.k_neighbors) {
        let node = &graph.nodes[j];
        let ctrl = edge_controller_unchecked(&b.mean, &node.center.mean, &graph.models.motion, &dare);
        let cap = ctrl.n_steps + graph.config.stabilization_cap;
        let n = cfg.n_og.max(1);
        let (mut cost, mut succ) = (0.0, 0usize);
        for _ in 0..n {
            if graph.in_node(b, j) {
                succ += 1;
                continue;
            }
            let x0 = sample_state(b, rng);
            let r = track_to_node(&ctrl, 0, &node.center, node.epsilon, &x0, b, cap, env, &graph.models, rng, |_, _| {});
            cost += r.cost;
            if r.outcome == TrackOutcome::Reached {
                succ += 1;
            }
        }
        let mean_cost = cost / n as f64;
        let p_success = succ as f64 / n as f64;
        let score = mean_cost + p_success * graph.j[j] + (1.0 - p_success) * graph.j_fail;
        out.push(OgrCandidate { target: j, score, mean_cost, p_success });
    }
    let best = (0..out.len()).min_by(|&a, &b| out[a].score.total_cmp(&out[b].score).then(a.cmp(&b)));
    Ok((out, best))
}

/// One-step lookahead over graph nodes, replanned every step.
pub fn ogr_execute(
    b0: &GaussianBelief,
    x0: &State,
    graph: &FirmGraph,
    env: &Environment,
    cfg: &OgrConfig,
    rngs: &mut EpisodeRngs,
    mut recorder: EpisodeRecorder,
    cap: usize,
) -> Result<EpisodeLog, ControlError> {
    let dare = tracking_gain(&graph.models.motion, &graph.config.lqg)?;
    let motion = &graph.models.motion;
    let (mut x, mut b) = (*x0, *b0);
    loop {
        if graph.in_goal(&b) {
            return Ok(recorder.finish(Outcome::Goal));
        }
        if recorder.steps() >= cap {
            return Ok(recorder.finish(Outcome::Cap));
        }
        let (cands, best) = ogr_scores(&b, graph, env, cfg, &mut rngs.planner)?;
        let (u, fallback) = match best {
            Some(i) => {
                let target = graph.nodes[cands[i].target].center.mean;
                (edge_controller_unchecked(&b.mean, &target, motion, &dare).apply(&b, 0, motion), false)
            }
            None => (nearest_node_stabilizer(&b, graph, &dare), true),
        };
        let s = simulate_step(&x, &b, &u, env, &graph.models, &mut rngs.world);
        recorder.record(&b, &s.state, &u, &s.observation, &s.belief, s.cost, fallback);
        if s.collided {
            return Ok(recorder.finish(Outcome::Collision));
        }
        (x, b) = (s.state, s.belief);
    }
}

fn nearest_node_stabilizer(b: &GaussianBelief, graph: &FirmGraph, dare: &DareSolution) -> Control {
    let metric = &graph.models.metric;
    let node = graph
        .nodes
        .iter()
        .min_by(|p, q| belief_distance(b, &p.center, metric).total_cmp(&belief_distance(b, &q.center, metric)));
    match node {
        Some(n) => {
            let c = edge_controller_unchecked(&b.mean, &n.center.mean, &graph.models.motion, dare);
            c.apply(b, c.n_steps, &graph.models.motion)
        }
        None => Control::zero(),
    }
}

/// Follows the graph policy: enter the nearest visible node, then run policy
/// edges to the goal. A timed-out edge re-enters through the nearest node.
pub fn firm_execute(
    b0: &GaussianBelief,
    x0: &State,
    graph: &FirmGraph,
    env: &Environment,
    rngs: &mut EpisodeRngs,
    mut recorder: EpisodeRecorder,
    cap: usize,
) -> Result<EpisodeLog, ControlError> {
    let dare = tracking_gain(&graph.models.motion, &graph.config.lqg)?;
    let models = &graph.models;
    let (mut x, mut b) = (*x0, *b0);
    let mut at: Option<usize> = None;
    loop {
        if graph.in_goal(&b) {
            return Ok(recorder.finish(Outcome::Goal));
        }
        let remaining = cap.saturating_sub(recorder.steps());
        if remaining == 0 {
            return Ok(recorder.finish(Outcome::Cap));
        }
        let (ctrl, target) = match at {
            None => {
                let Some(&(entry, _)) = graph.neighbors_of_belief(env, &b, 1).first() else {
                    return Ok(recorder.finish(Outcome::Infeasible));
                };
                if graph.j[entry] >= graph.j_fail {
                    return Ok(recorder.finish(Outcome::Infeasible));
                }
                if graph.in_node(&b, entry) {
                    at = Some(entry);
                    continue;
                }
                (edge_controller_unchecked(&b.mean, &graph.nodes[entry].center.mean, &models.motion, &dare), entry)
            }
            Some(i) => match graph.policy[i] {
                Some(e) => (graph.edges[e].controller.clone(), graph.edges[e].to),
                None => return Ok(recorder.finish(Outcome::Infeasible)),
            },
        };
        let node = &graph.nodes[target];
        let limit = (ctrl.n_steps + graph.config.stabilization_cap).min(remaining);
        let mut prev = b;
        let r = track_to_node(&ctrl, 0, &node.center, node.epsilon, &x, &b, limit, env, models, &mut rngs.world, |u, s| {
            recorder.record(&prev, &s.state, u, &s.observation, &s.belief, s.cost, false);
            prev = s.belief;
        });
        (x, b) = (r.state, r.belief);
        match r.outcome {
            TrackOutcome::Collision => return Ok(recorder.finish(Outcome::Collision)),
            TrackOutcome::Reached => at = Some(target),
            TrackOutcome::Cap => at = None,
        }
    }
}
