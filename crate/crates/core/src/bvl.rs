//! Online forward search guided by the offline graph: tree search over
//! controllers toward nearby graph nodes, initialized and rolled out with the
//! graph's cost-to-go, executed one step at a time.

use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use crate::baselines::{urm_heuristic, HeuristicParams, UniformRoadmap};
use crate::beliefs::{belief_distance, is_in_node, Control, GaussianBelief, State};
use crate::controllers::{edge_controller_unchecked, tracking_gain, ControlError, DareSolution, LqgWeights};
use crate::episode::{EpisodeLog, EpisodeRecorder, EpisodeRngs, Outcome};
use crate::firm::FirmGraph;
use crate::models::Models;
use crate::search::{BackupRule, BeliefTree, SearchConfig, SearchDomain, Terminal, Transition};
use crate::simulation::{sample_state, simulate_step, track_to_node, TrackOutcome};
use crate::world::Environment;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PlannerConfig {
    /// Simulations per decision.
    pub n_sims: usize,
    /// Depth of the tree phase, in steps.
    pub horizon: usize,
    /// UCT exploration constant; derived from the goal's step cost when unset.
    pub eta_q: Option<f64>,
    /// Rollout exploration bonus.
    pub eta_w: f64,
    pub k_neighbors: usize,
    /// Also offer the graph policy's next node from each neighbor.
    pub policy_successors: bool,
    pub delta_match: f64,
    /// Step cap of the rollout's final commitment to a node.
    pub bridge_cap: usize,
    /// An action toward a node follows the node's policy edge once the
    /// belief is within this multiple of the node's ball radius.
    pub handoff_radius: f64,
}

impl Default for PlannerConfig {
    fn default() -> Self {
        Self { n_sims: 500, horizon: 30, eta_q: None, eta_w: 0.05, k_neighbors: 5, policy_successors: true, delta_match: 0.1, bridge_cap: 600, handoff_radius: 2.0 }
    }
}

impl PlannerConfig {
    pub fn search_config(&self, backup: BackupRule, typical_step_cost: f64) -> SearchConfig {
        SearchConfig {
            n_sims: self.n_sims,
            horizon: self.horizon,
            eta_q: self.eta_q.unwrap_or(2.0 * typical_step_cost * std::f64::consts::SQRT_2),
            delta_match: self.delta_match,
            backup,
        }
    }
}

/// Straight-line travel time to `target` priced at the current step cost.
pub fn heuristic_edge_cost(b: &GaussianBelief, target: &State, models: &Models) -> f64 {
    let steps = (b.mean.position_distance(target) / models.motion.step_length() - 1e-9).ceil().max(0.0);
    steps * models.step_cost(b)
}

/// Controller toward a target pose.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NavAction {
    pub target: usize,
    pub pose: State,
}

/// Where actions point and how their values are estimated.
#[derive(Debug, Clone, Copy)]
pub enum Guidance<'a> {
    /// Graph nodes valued by the offline cost-to-go; rollouts end by
    /// committing to a node.
    Graph(&'a FirmGraph),
    /// Grid targets valued by a straight-line heuristic; rollouts end with the heuristic.
    Roadmap { roadmap: &'a UniformRoadmap, heuristic: HeuristicParams, stay_penalty: f64 },
}

/// The rover navigation problem seen by the tree search.
pub struct NavigationDomain<'a> {
    pub env: &'a Environment,
    pub models: Models,
    pub dare: DareSolution,
    pub guidance: Guidance<'a>,
    pub cfg: PlannerConfig,
    pub goal: GaussianBelief,
    pub goal_epsilon: f64,
    pub j_fail: f64,
}

struct Candidate {
    action: NavAction,
    value: f64,
    penalty: f64,
}

impl<'a> NavigationDomain<'a> {
    pub fn for_graph(env: &'a Environment, graph: &'a FirmGraph, cfg: PlannerConfig) -> Result<Self, ControlError> {
        let dare = tracking_gain(&graph.models.motion, &graph.config.lqg)?;
        Ok(Self {
            env,
            models: graph.models,
            dare,
            guidance: Guidance::Graph(graph),
            cfg,
            goal: *graph.goal_center(),
            goal_epsilon: graph.nodes[graph.goal].epsilon,
            j_fail: graph.j_fail,
        })
    }

    #[allow(clippy::too_many_arguments)]
    pub fn for_roadmap(
        env: &'a Environment,
        roadmap: &'a UniformRoadmap,
        models: Models,
        lqg: LqgWeights,
        heuristic: HeuristicParams,
        stay_penalty: f64,
        goal_epsilon: f64,
        j_fail: f64,
        cfg: PlannerConfig,
    ) -> Result<Self, ControlError> {
        let dare = tracking_gain(&models.motion, &lqg)?;
        Ok(Self {
            env,
            models,
            dare,
            guidance: Guidance::Roadmap { roadmap, heuristic, stay_penalty },
            cfg,
            goal: GaussianBelief { mean: env.goal, cov: heuristic.p_c_ref },
            goal_epsilon,
            j_fail,
        })
    }

    pub fn in_goal(&self, b: &GaussianBelief) -> bool {
        is_in_node(b, &self.goal, self.goal_epsilon, &self.models.metric)
    }

    pub fn typical_step_cost(&self) -> f64 {
        self.models.step_cost(&self.goal)
    }

    pub fn search_config(&self) -> SearchConfig {
        let backup = match self.guidance {
            Guidance::Graph(_) => BackupRule::JBootstrap,
            Guidance::Roadmap { .. } => BackupRule::MonteCarloReturn,
        };
        self.cfg.search_config(backup, self.typical_step_cost())
    }

    fn stay_target(&self, b: &GaussianBelief) -> Option<usize> {
        match self.guidance {
            Guidance::Roadmap { roadmap, .. } => roadmap.nearest(&b.mean),
            Guidance::Graph(_) => None,
        }
    }

    fn candidates(&self, b: &GaussianBelief) -> Vec<Candidate> {
        match self.guidance {
            Guidance::Graph(g) => {
                let mut targets: Vec<usize> = g.neighbors_of_belief(self.env, b, self.cfg.k_neighbors).into_iter().map(|(j, _)| j).collect();
                // the graph policy's next node from each neighbor, so that
                // leaving a node along its policy edge is always on the menu
                let n = if self.cfg.policy_successors { targets.len() } else { 0 };
                for i in 0..n {
                    if let Some(e) = g.policy[targets[i]] {
                        let t = g.edges[e].to;
                        if !targets.contains(&t) && !self.env.collides_with_margin(&b.mean, &g.nodes[t].center.mean, g.config.clearance) {
                            targets.push(t);
                        }
                    }
                }
                targets
                    .into_iter()
                    .map(|j| Candidate { action: NavAction { target: j, pose: g.nodes[j].center.mean }, value: g.j[j], penalty: 0.0 })
                    .collect()
            }
            Guidance::Roadmap { roadmap, heuristic, stay_penalty } => {
                let stay = roadmap.nearest(&b.mean);
                roadmap
                    .neighbors(self.env, &b.mean, self.cfg.k_neighbors)
                    .into_iter()
                    .map(|j| {
                        let pose = roadmap.targets[j];
                        let target_belief = GaussianBelief { mean: pose, cov: heuristic.p_c_ref };
                        Candidate {
                            action: NavAction { target: j, pose },
                            value: urm_heuristic(&target_belief, &self.env.goal, &heuristic),
                            penalty: if Some(j) == stay { stay_penalty } else { 0.0 },
                        }
                    })
                    .collect()
            }
        }
    }

    /// Control of the controller toward `a.pose` designed at `b`. Near the
    /// target node (see `handoff_radius`) the action hands over to the node's
    /// policy edge, which is what the node's value `J̃` prices.
    pub fn control(&self, b: &GaussianBelief, a: &NavAction) -> Control {
        let pose = self.handoff(b, a).unwrap_or(a.pose);
        edge_controller_unchecked(&b.mean, &pose, &self.models.motion, &self.dare).apply(b, 0, &self.models.motion)
    }

    fn handoff(&self, b: &GaussianBelief, a: &NavAction) -> Option<State> {
        let Guidance::Graph(g) = self.guidance else { return None };
        let e = g.policy[a.target]?;
        let node = &g.nodes[a.target];
        let near = belief_distance(b, &node.center, &self.models.metric) <= self.cfg.handoff_radius * node.epsilon;
        let next = g.nodes[g.edges[e].to].center.mean;
        (near && !self.env.collides_with_margin(&b.mean, &next, g.config.clearance)).then_some(next)
    }

    /// Regulation toward the nearest target, used when the menu is empty.
    pub fn fallback_control(&self, b: &GaussianBelief) -> Control {
        let pose = match self.guidance {
            Guidance::Graph(g) => g
                .nodes
                .iter()
                .min_by(|x, y| {
                    belief_distance(b, &x.center, &self.models.metric).total_cmp(&belief_distance(b, &y.center, &self.models.metric))
                })
                .map(|n| n.center.mean),
            Guidance::Roadmap { roadmap, .. } => roadmap.nearest(&b.mean).map(|j| roadmap.targets[j]),
        };
        match pose {
            Some(p) => {
                let ctrl = edge_controller_unchecked(&b.mean, &p, &self.models.motion, &self.dare);
                ctrl.apply(b, ctrl.n_steps, &self.models.motion)
            }
            None => Control::zero(),
        }
    }

    fn rollout_weights(&self, b: &GaussianBelief, cands: &[Candidate]) -> Vec<f64> {
        cands
            .iter()
            .map(|c| {
                let denom = heuristic_edge_cost(b, &c.action.pose, &self.models) + c.value + c.penalty;
                if denom <= 0.0 { f64::INFINITY } else { 1.0 / denom + self.cfg.eta_w }
            })
            .collect()
    }

    fn sample_candidate(weights: &[f64], rng: &mut dyn RngCore) -> usize {
        if let Some(i) = weights.iter().position(|w| w.is_infinite()) {
            return i;
        }
        let total: f64 = weights.iter().sum();
        let mut u = rng.random::<f64>() * total;
        for (i, w) in weights.iter().enumerate() {
            if u < *w {
                return i;
            }
            u -= w;
        }
        weights.len() - 1
    }

    /// Selection probabilities of the rollout policy at `b`.
    pub fn rollout_distribution(&self, b: &GaussianBelief) -> Vec<(NavAction, f64)> {
        let cands = self.candidates(b);
        let w = self.rollout_weights(b, &cands);
        let total: f64 = w.iter().sum();
        cands.into_iter().zip(w).map(|(c, w)| (c.action, if total.is_infinite() { if w.is_infinite() { 1.0 } else { 0.0 } } else { w / total })).collect()
    }

    fn bridge(&self, g: &FirmGraph, target: usize, x: &State, b: &GaussianBelief, rng: &mut dyn RngCore) -> f64 {
        let node = &g.nodes[target];
        if g.in_node(b, target) {
            return g.j[target];
        }
        let ctrl = edge_controller_unchecked(&b.mean, &node.center.mean, &self.models.motion, &self.dare);
        let r = track_to_node(&ctrl, 0, &node.center, node.epsilon, x, b, self.cfg.bridge_cap, self.env, &self.models, rng, |_, _| {});
        match r.outcome {
            TrackOutcome::Reached => r.cost + g.j[target],
            TrackOutcome::Collision | TrackOutcome::Cap => r.cost + self.j_fail,
        }
    }
}

impl SearchDomain for NavigationDomain<'_> {
    type State = State;
    type Belief = GaussianBelief;
    type Action = NavAction;

    fn sample_state(&self, b: &GaussianBelief, rng: &mut dyn RngCore) -> State {
        sample_state(b, rng)
    }

    fn menu(&self, b: &GaussianBelief) -> Vec<(NavAction, f64)> {
        self.candidates(b)
            .into_iter()
            .map(|c| {
                let q = heuristic_edge_cost(b, &c.action.pose, &self.models) + c.value + c.penalty;
                (c.action, q)
            })
            .collect()
    }

    fn step(&self, x: &State, b: &GaussianBelief, a: &NavAction, rng: &mut dyn RngCore) -> Transition<State, GaussianBelief> {
        let u = self.control(b, a);
        let s = simulate_step(x, b, &u, self.env, &self.models, rng);
        let penalty = match self.guidance {
            Guidance::Roadmap { stay_penalty, .. } if self.stay_target(b) == Some(a.target) => stay_penalty,
            _ => 0.0,
        };
        let terminal = if s.collided {
            Some(Terminal::Failure)
        } else if self.in_goal(&s.belief) {
            Some(Terminal::Goal)
        } else {
            None
        };
        Transition { next_state: s.state, next_belief: s.belief, cost: s.cost + penalty, terminal }
    }

    fn rollout(&self, x: &State, b: &GaussianBelief, k: usize, prev: Option<&NavAction>, rng: &mut dyn RngCore) -> f64 {
        let (mut x, mut b, mut k) = (*x, *b, k);
        let mut prev = prev.copied();
        let mut cost = 0.0;
        while k <= self.cfg.horizon {
            if self.in_goal(&b) {
                return cost;
            }
            let cands = self.candidates(&b);
            if cands.is_empty() {
                return cost + self.j_fail;
            }
            let w = self.rollout_weights(&b, &cands);
            let c = &cands[Self::sample_candidate(&w, rng)];
            let t = self.step(&x, &b, &c.action, rng);
            cost += t.cost;
            match t.terminal {
                Some(Terminal::Failure) => return cost + self.j_fail,
                Some(Terminal::Goal) => return cost,
                None => {}
            }
            (x, b) = (t.next_state, t.next_belief);
            prev = Some(c.action);
            k += 1;
        }
        if self.in_goal(&b) {
            return cost;
        }
        match self.guidance {
            Guidance::Graph(g) => {
                let target = match prev {
                    Some(a) => a.target,
                    None => match g.neighbors_of_belief(self.env, &b, 1).first() {
                        Some(&(j, _)) => j,
                        None => return cost + self.j_fail,
                    },
                };
                cost + self.bridge(g, target, &x, &b, rng)
            }
            Guidance::Roadmap { heuristic, .. } => cost + urm_heuristic(&b, &self.env.goal, &heuristic),
        }
    }

    fn distance(&self, a: &GaussianBelief, b: &GaussianBelief) -> f64 {
        belief_distance(a, b, &self.models.metric)
    }

    fn is_stay(&self, b: &GaussianBelief, a: &NavAction) -> bool {
        self.stay_target(b) == Some(a.target)
    }

    fn j_fail(&self) -> f64 {
        self.j_fail
    }
}

/// Search, execute one control on the true system, observe, filter; repeat
/// until the belief enters the goal node, the rover collides, or `cap` steps.
pub fn run_tree_planner(
    domain: &NavigationDomain,
    b0: &GaussianBelief,
    x0: &State,
    rngs: &mut EpisodeRngs,
    mut recorder: EpisodeRecorder,
    cap: usize,
) -> EpisodeLog {
    let cfg = domain.search_config();
    let mut tree: BeliefTree<GaussianBelief, NavAction> = BeliefTree::new();
    let (mut x, mut b) = (*x0, *b0);
    loop {
        if domain.in_goal(&b) {
            return recorder.finish(Outcome::Goal);
        }
        if recorder.steps() >= cap {
            return recorder.finish(Outcome::Cap);
        }
        let choice = tree.search(domain, &b, &cfg, &mut rngs.planner);
        let (u, fallback) = match choice {
            Some(ai) => {
                let root = tree.root_node().expect("search leaves a root");
                (domain.control(&b, &root.actions[ai].action), false)
            }
            None => (domain.fallback_control(&b), true),
        };
        let s = simulate_step(&x, &b, &u, domain.env, &domain.models, &mut rngs.world);
        recorder.record(&b, &s.state, &u, &s.observation, &s.belief, s.cost, fallback);
        if s.collided {
            return recorder.finish(Outcome::Collision);
        }
        (x, b) = (s.state, s.belief);
        match choice {
            Some(ai) => {
                tree.advance(domain, ai, &b, &cfg);
            }
            None => tree = BeliefTree::new(),
        }
    }
}

/// Graph-guided tree search from `b0`, the true start state being `x0`.
pub fn plan_and_execute(
    b0: &GaussianBelief,
    x0: &State,
    graph: &FirmGraph,
    env: &Environment,
    cfg: &PlannerConfig,
    rngs: &mut EpisodeRngs,
    recorder: EpisodeRecorder,
    cap: usize,
) -> Result<EpisodeLog, ControlError> {
    let domain = NavigationDomain::for_graph(env, graph, *cfg)?;
    Ok(run_tree_planner(&domain, b0, x0, rngs, recorder, cap))
}
