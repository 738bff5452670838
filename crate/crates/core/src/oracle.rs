//! Brute-force ground truth on small discrete problems: exact policy
//! evaluation of cost and risk, exhaustive policy enumeration, and
//! depth-limited expectimax.

use std::collections::{HashMap, VecDeque};

use nalgebra::{DMatrix, DVector};
use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::firm::EdgeStats;
use crate::search::{SearchDomain, Terminal, Transition};

pub const MAX_STATES: usize = 200;
pub const MAX_POLICIES: u64 = 1_000_000;
pub const MAX_EXPECTIMAX_BRANCHES: f64 = 1e7;
const STOCHASTIC_TOL: f64 = 1e-12;

#[derive(Debug, Error, PartialEq)]
pub enum OracleError {
    #[error("{0} states exceed the limit of {MAX_STATES}")]
    TooManyStates(usize),
    #[error("state {state} action {action}: transition probabilities sum to {sum}")]
    NotStochastic { state: usize, action: usize, sum: f64 },
    #[error("state {state} action {action}: successor {next} out of range")]
    BadSuccessor { state: usize, action: usize, next: usize },
    #[error("terminal state {0} has actions")]
    TerminalWithActions(usize),
    #[error("state {0} is both goal and failure")]
    GoalAndFailure(usize),
    #[error("{0} deterministic policies exceed the enumeration limit")]
    TooManyPolicies(u64),
    #[error("expectimax would expand about {0:.3e} branches")]
    TooDeep(f64),
    #[error("policy does not choose a valid action at state {0}")]
    BadPolicy(usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MdpAction {
    pub cost: f64,
    /// `(successor, probability)` pairs.
    pub next: Vec<(usize, f64)>,
}

/// Finite problem with absorbing goal and failure states. States without
/// actions that are neither goal nor failure are dead ends: they never
/// terminate and are valued as failures.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscreteBeliefMdp {
    pub actions: Vec<Vec<MdpAction>>,
    pub goal: Vec<bool>,
    pub failure: Vec<bool>,
}

/// Chosen action index per state; `None` at terminal and dead-end states.
pub type Policy = Vec<Option<usize>>;

impl DiscreteBeliefMdp {
    pub fn new(actions: Vec<Vec<MdpAction>>, goal: Vec<bool>, failure: Vec<bool>) -> Result<Self, OracleError> {
        let m = Self { actions, goal, failure };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<(), OracleError> {
        let n = self.len();
        if n > MAX_STATES {
            return Err(OracleError::TooManyStates(n));
        }
        assert!(self.goal.len() == n && self.failure.len() == n, "goal and failure flags must cover every state");
        for s in 0..n {
            if self.goal[s] && self.failure[s] {
                return Err(OracleError::GoalAndFailure(s));
            }
            if self.is_terminal(s) && !self.actions[s].is_empty() {
                return Err(OracleError::TerminalWithActions(s));
            }
            for (a, act) in self.actions[s].iter().enumerate() {
                let mut sum = 0.0;
                for &(t, p) in &act.next {
                    if t >= n {
                        return Err(OracleError::BadSuccessor { state: s, action: a, next: t });
                    }
                    if !(0.0..=1.0).contains(&p) {
                        return Err(OracleError::NotStochastic { state: s, action: a, sum: p });
                    }
                    sum += p;
                }
                if (sum - 1.0).abs() > STOCHASTIC_TOL {
                    return Err(OracleError::NotStochastic { state: s, action: a, sum });
                }
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    pub fn is_terminal(&self, s: usize) -> bool {
        self.goal[s] || self.failure[s]
    }

    /// Number of deterministic stationary policies.
    pub fn policy_count(&self) -> u64 {
        self.actions.iter().filter(|a| !a.is_empty()).fold(1u64, |acc, a| acc.saturating_mul(a.len() as u64))
    }

    /// The `index`-th policy in mixed-radix order over states with actions.
    pub fn policy_from_index(&self, mut index: u64) -> Policy {
        self.actions
            .iter()
            .map(|a| {
                if a.is_empty() {
                    None
                } else {
                    let k = a.len() as u64;
                    let c = (index % k) as usize;
                    index /= k;
                    Some(c)
                }
            })
            .collect()
    }

    fn check_policy(&self, policy: &Policy) -> Result<(), OracleError> {
        for s in 0..self.len() {
            match policy.get(s).copied().flatten() {
                Some(a) if a < self.actions[s].len() => {}
                None if self.actions[s].is_empty() => {}
                _ => return Err(OracleError::BadPolicy(s)),
            }
        }
        Ok(())
    }

    /// Samples a successor of `(s, a)`.
    pub fn sample_next(&self, s: usize, a: usize, rng: &mut dyn RngCore) -> usize {
        let next = &self.actions[s][a].next;
        let mut u: f64 = rng.random();
        for &(t, p) in next {
            if u < p {
                return t;
            }
            u -= p;
        }
        next.iter().rev().find(|(_, p)| *p > 0.0).map(|(t, _)| *t).expect("action has a successor")
    }
}

/// Chain of a fixed policy: per state, `(successor, probability)` pairs.
fn policy_chain(mdp: &DiscreteBeliefMdp, policy: &Policy) -> Vec<Vec<(usize, f64)>> {
    (0..mdp.len())
        .map(|s| match policy[s] {
            Some(a) if !mdp.is_terminal(s) => mdp.actions[s][a].next.iter().copied().filter(|(_, p)| *p > 0.0).collect(),
            _ => Vec::new(),
        })
        .collect()
}

/// States that reach some state in `target` with positive probability.
fn can_reach(chain: &[Vec<(usize, f64)>], target: &[bool]) -> Vec<bool> {
    let n = chain.len();
    let mut pred: Vec<Vec<usize>> = vec![Vec::new(); n];
    for (s, row) in chain.iter().enumerate() {
        for &(t, _) in row {
            pred[t].push(s);
        }
    }
    let mut seen = target.to_vec();
    let mut queue: VecDeque<usize> = (0..n).filter(|&s| target[s]).collect();
    while let Some(t) = queue.pop_front() {
        for &s in &pred[t] {
            if !seen[s] {
                seen[s] = true;
                queue.push_back(s);
            }
        }
    }
    seen
}

/// States from which the chain terminates with probability one.
fn proper_states(mdp: &DiscreteBeliefMdp, chain: &[Vec<(usize, f64)>]) -> Vec<bool> {
    let terminal: Vec<bool> = (0..mdp.len()).map(|s| mdp.is_terminal(s)).collect();
    let reach = can_reach(chain, &terminal);
    // a state is improper if it can reach a state that cannot terminate
    let stuck: Vec<bool> = reach.iter().map(|r| !r).collect();
    let reach_stuck = can_reach(chain, &stuck);
    reach_stuck.iter().map(|r| !r).collect()
}

/// Solves `x = b + P x` over the states flagged in `active`, with `fixed`
/// values elsewhere.
fn solve_restricted(chain: &[Vec<(usize, f64)>], active: &[bool], b: &[f64], fixed: &[f64]) -> Vec<f64> {
    let idx: Vec<usize> = (0..chain.len()).filter(|&s| active[s]).collect();
    let mut pos = vec![usize::MAX; chain.len()];
    for (i, &s) in idx.iter().enumerate() {
        pos[s] = i;
    }
    let m = idx.len();
    let mut out = fixed.to_vec();
    if m == 0 {
        return out;
    }
    let mut a = DMatrix::<f64>::identity(m, m);
    let mut rhs = DVector::<f64>::zeros(m);
    for (i, &s) in idx.iter().enumerate() {
        rhs[i] = b[s];
        for &(t, p) in &chain[s] {
            if active[t] {
                a[(i, pos[t])] -= p;
            } else {
                rhs[i] += p * fixed[t];
            }
        }
    }
    let x = a.lu().solve(&rhs).expect("transient states give a nonsingular system");
    for (i, &s) in idx.iter().enumerate() {
        out[s] = x[i];
    }
    out
}

/// Expected total cost of `policy` with failure priced at `j_fail`.
/// States from which the policy may never terminate get `j_fail`; all values
/// are clamped to at most `j_fail`.
pub fn exact_policy_cost(mdp: &DiscreteBeliefMdp, policy: &Policy, j_fail: f64) -> Result<Vec<f64>, OracleError> {
    mdp.check_policy(policy)?;
    let chain = policy_chain(mdp, policy);
    let proper = proper_states(mdp, &chain);
    let n = mdp.len();
    let active: Vec<bool> = (0..n).map(|s| proper[s] && !mdp.is_terminal(s)).collect();
    let fixed: Vec<f64> = (0..n).map(|s| if mdp.goal[s] { 0.0 } else { j_fail }).collect();
    let costs: Vec<f64> = (0..n).map(|s| policy[s].map_or(0.0, |a| mdp.actions[s][a].cost)).collect();
    Ok(solve_restricted(&chain, &active, &costs, &fixed).into_iter().map(|v| v.min(j_fail)).collect())
}

/// Probability of not reaching the goal under `policy`: entering the failure
/// set, or never terminating.
pub fn exact_policy_risk(mdp: &DiscreteBeliefMdp, policy: &Policy) -> Result<Vec<f64>, OracleError> {
    mdp.check_policy(policy)?;
    let chain = policy_chain(mdp, policy);
    let reach_goal = can_reach(&chain, &mdp.goal);
    let n = mdp.len();
    let active: Vec<bool> = (0..n).map(|s| reach_goal[s] && !mdp.is_terminal(s)).collect();
    let fixed: Vec<f64> = (0..n).map(|s| if mdp.goal[s] { 1.0 } else { 0.0 }).collect();
    let p_goal = solve_restricted(&chain, &active, &vec![0.0; n], &fixed);
    Ok(p_goal.into_iter().map(|g| (1.0 - g).clamp(0.0, 1.0)).collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct Enumeration {
    pub n_policies: u64,
    /// Componentwise minimum of the cost over all policies.
    pub j_star: Vec<f64>,
    /// Componentwise minimum of the risk over all policies.
    pub rho_star: Vec<f64>,
    /// Policies attaining `j_star` at every state.
    pub cost_argmin: Vec<Policy>,
    /// Policies attaining `rho_star` at every state.
    pub risk_argmin: Vec<Policy>,
}

impl Enumeration {
    pub fn best_cost_policy(&self) -> Option<&Policy> {
        self.cost_argmin.first()
    }

    pub fn best_risk_policy(&self) -> Option<&Policy> {
        self.risk_argmin.first()
    }

    /// Every cost-optimal policy is also risk-optimal.
    pub fn cost_argmin_within_risk_argmin(&self) -> bool {
        self.cost_argmin.iter().all(|p| self.risk_argmin.contains(p))
    }
}

fn close(a: f64, b: f64) -> bool {
    (a - b).abs() <= 1e-9 * (1.0 + a.abs().max(b.abs()))
}

/// Evaluates every deterministic stationary policy and collects the
/// componentwise optima with their tie sets.
pub fn enumerate_optimal(mdp: &DiscreteBeliefMdp, j_fail: f64) -> Result<Enumeration, OracleError> {
    mdp.validate()?;
    let count = mdp.policy_count();
    if count > MAX_POLICIES {
        return Err(OracleError::TooManyPolicies(count));
    }
    let n = mdp.len();
    let mut evals = Vec::with_capacity(count as usize);
    let mut j_star = vec![f64::INFINITY; n];
    let mut rho_star = vec![f64::INFINITY; n];
    for i in 0..count {
        let p = mdp.policy_from_index(i);
        let j = exact_policy_cost(mdp, &p, j_fail)?;
        let rho = exact_policy_risk(mdp, &p)?;
        for s in 0..n {
            j_star[s] = j_star[s].min(j[s]);
            rho_star[s] = rho_star[s].min(rho[s]);
        }
        evals.push((p, j, rho));
    }
    let mut cost_argmin = Vec::new();
    let mut risk_argmin = Vec::new();
    for (p, j, rho) in evals {
        let cost_opt = (0..n).all(|s| close(j[s], j_star[s]));
        let risk_opt = (0..n).all(|s| close(rho[s], rho_star[s]));
        if cost_opt {
            cost_argmin.push(p.clone());
        }
        if risk_opt {
            risk_argmin.push(p);
        }
    }
    Ok(Enumeration { n_policies: count, j_star, rho_star, cost_argmin, risk_argmin })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExpectimaxResult {
    pub action: Option<usize>,
    pub value: f64,
    /// Value of every root action.
    pub q: Vec<f64>,
}

/// Exact depth-limited min-expectation search from `s0`. At depth zero a
/// non-terminal state is valued by `leaf`; dead ends are failures.
pub fn expectimax_action(mdp: &DiscreteBeliefMdp, s0: usize, depth: usize, leaf: &[f64], j_fail: f64) -> Result<ExpectimaxResult, OracleError> {
    let branching = mdp
        .actions
        .iter()
        .flat_map(|acts| acts.iter().map(move |a| acts.len() * a.next.len()))
        .max()
        .unwrap_or(1)
        .max(1) as f64;
    let estimate = branching.powi(depth as i32);
    if estimate > MAX_EXPECTIMAX_BRANCHES {
        return Err(OracleError::TooDeep(estimate));
    }
    let mut memo: HashMap<(usize, usize), f64> = HashMap::new();
    let q = root_q(mdp, s0, depth, leaf, j_fail, &mut memo);
    let action = argmin(&q);
    let value = match action {
        Some(a) => q[a],
        None => terminal_value(mdp, s0, j_fail).unwrap_or(j_fail),
    };
    Ok(ExpectimaxResult { action, value, q })
}

fn terminal_value(mdp: &DiscreteBeliefMdp, s: usize, j_fail: f64) -> Option<f64> {
    if mdp.goal[s] {
        Some(0.0)
    } else if mdp.failure[s] || mdp.actions[s].is_empty() {
        Some(j_fail)
    } else {
        None
    }
}

fn argmin(q: &[f64]) -> Option<usize> {
    (0..q.len()).min_by(|&a, &b| q[a].total_cmp(&q[b]).then(a.cmp(&b)))
}

fn root_q(mdp: &DiscreteBeliefMdp, s: usize, depth: usize, leaf: &[f64], j_fail: f64, memo: &mut HashMap<(usize, usize), f64>) -> Vec<f64> {
    if terminal_value(mdp, s, j_fail).is_some() || depth == 0 {
        return Vec::new();
    }
    mdp.actions[s]
        .iter()
        .map(|a| a.cost + a.next.iter().map(|&(t, p)| p * value(mdp, t, depth - 1, leaf, j_fail, memo)).sum::<f64>())
        .collect()
}

fn value(mdp: &DiscreteBeliefMdp, s: usize, depth: usize, leaf: &[f64], j_fail: f64, memo: &mut HashMap<(usize, usize), f64>) -> f64 {
    if let Some(v) = terminal_value(mdp, s, j_fail) {
        return v;
    }
    if depth == 0 {
        return leaf[s];
    }
    if let Some(&v) = memo.get(&(s, depth)) {
        return v;
    }
    let q = root_q(mdp, s, depth, leaf, j_fail, memo);
    let v = q.iter().copied().fold(f64::INFINITY, f64::min);
    memo.insert((s, depth), v);
    v
}

/// The graph's decision problem: one state per node plus a shared failure
/// state (last index); each out-edge is an action that reaches its target
/// with the edge's success probability and fails otherwise. Actions follow
/// edge order.
pub fn from_graph(n_nodes: usize, goal: usize, edges: &[EdgeStats]) -> Result<DiscreteBeliefMdp, OracleError> {
    let fail = n_nodes;
    let mut actions = vec![Vec::new(); n_nodes + 1];
    for e in edges {
        if e.from == goal {
            continue;
        }
        let mut next = Vec::new();
        if e.p_success > 0.0 {
            next.push((e.to, e.p_success));
        }
        if e.p_success < 1.0 {
            next.push((fail, 1.0 - e.p_success));
        }
        actions[e.from].push(MdpAction { cost: e.cost, next });
    }
    let mut goal_flags = vec![false; n_nodes + 1];
    goal_flags[goal] = true;
    let mut failure = vec![false; n_nodes + 1];
    failure[fail] = true;
    DiscreteBeliefMdp::new(actions, goal_flags, failure)
}

/// A fully observed discrete problem seen through the tree-search interface.
/// New nodes are initialized with `cost + E[guide(next)]`; rollouts pick
/// actions with weights `1/(cost + E[guide]) + eta_w` and past the horizon
/// end with `guide`.
pub struct MdpSearchDomain<'a> {
    pub mdp: &'a DiscreteBeliefMdp,
    pub guide: Vec<f64>,
    pub horizon: usize,
    pub eta_w: f64,
    pub j_fail: f64,
}

impl MdpSearchDomain<'_> {
    fn q_guess(&self, s: usize, a: usize) -> f64 {
        let act = &self.mdp.actions[s][a];
        act.cost + act.next.iter().map(|&(t, p)| p * self.terminal_or_guide(t)).sum::<f64>()
    }

    fn terminal_or_guide(&self, s: usize) -> f64 {
        terminal_value(self.mdp, s, self.j_fail).unwrap_or(self.guide[s])
    }
}

impl SearchDomain for MdpSearchDomain<'_> {
    type State = usize;
    type Belief = usize;
    type Action = usize;

    fn sample_state(&self, b: &usize, _rng: &mut dyn RngCore) -> usize {
        *b
    }

    fn menu(&self, b: &usize) -> Vec<(usize, f64)> {
        (0..self.mdp.actions[*b].len()).map(|a| (a, self.q_guess(*b, a))).collect()
    }

    fn step(&self, x: &usize, _b: &usize, a: &usize, rng: &mut dyn RngCore) -> Transition<usize, usize> {
        let t = self.mdp.sample_next(*x, *a, rng);
        let terminal = if self.mdp.goal[t] {
            Some(Terminal::Goal)
        } else if self.mdp.failure[t] {
            Some(Terminal::Failure)
        } else {
            None
        };
        Transition { next_state: t, next_belief: t, cost: self.mdp.actions[*x][*a].cost, terminal }
    }

    fn rollout(&self, x: &usize, _b: &usize, k: usize, _prev: Option<&usize>, rng: &mut dyn RngCore) -> f64 {
        let (mut s, mut k, mut total) = (*x, k, 0.0);
        loop {
            if let Some(v) = terminal_value(self.mdp, s, self.j_fail) {
                return total + v;
            }
            if k > self.horizon {
                return total + self.guide[s];
            }
            let w: Vec<f64> = (0..self.mdp.actions[s].len())
                .map(|a| {
                    let d = self.q_guess(s, a);
                    if d <= 0.0 { f64::INFINITY } else { 1.0 / d + self.eta_w }
                })
                .collect();
            let a = match w.iter().position(|v| v.is_infinite()) {
                Some(i) => i,
                None => {
                    let mut u = rng.random::<f64>() * w.iter().sum::<f64>();
                    let mut pick = w.len() - 1;
                    for (i, v) in w.iter().enumerate() {
                        if u < *v {
                            pick = i;
                            break;
                        }
                        u -= v;
                    }
                    pick
                }
            };
            total += self.mdp.actions[s][a].cost;
            s = self.mdp.sample_next(s, a, rng);
            k += 1;
        }
    }

    fn distance(&self, a: &usize, b: &usize) -> f64 {
        if a == b { 0.0 } else { f64::INFINITY }
    }

    fn j_fail(&self) -> f64 {
        self.j_fail
    }
}

/// Five-state instance where a cheap risky shortcut competes with a longer
/// safe route. States: 0 start, 1 safe midpoint, 2 risky midpoint, 3 goal,
/// 4 failure. From 0: safe (cost 10 to 1) or risky (cost 1 to 2); 1 reaches
/// the goal for 10; 2 reaches the goal for 1 with probability 0.9 and fails
/// otherwise, or retreats to 0 for 1. 1 may also retreat to 0 for 1.
pub fn risk_tradeoff_instance() -> DiscreteBeliefMdp {
    let a = |cost: f64, next: Vec<(usize, f64)>| MdpAction { cost, next };
    DiscreteBeliefMdp::new(
        vec![
            vec![a(10.0, vec![(1, 1.0)]), a(1.0, vec![(2, 1.0)])],
            vec![a(10.0, vec![(3, 1.0)]), a(1.0, vec![(0, 1.0)])],
            vec![a(1.0, vec![(3, 0.9), (4, 0.1)]), a(1.0, vec![(0, 1.0)])],
            vec![],
            vec![],
        ],
        vec![false, false, false, true, false],
        vec![false, false, false, false, true],
    )
    .expect("valid instance")
}

/// Two-stage instance whose cheapest first step leads into a risky region.
/// States: 0 start, 1..=4 intermediate, 5 goal, 6 failure. With `j_fail` =
/// 100 the optimal first action is 0 (value 3.5), ahead of 1 (6) and 2 (6.5),
/// while one-step costs rank them 2, 0, 1.
pub fn two_stage_instance() -> DiscreteBeliefMdp {
    let a = |cost: f64, next: Vec<(usize, f64)>| MdpAction { cost, next };
    let (g, f) = (5, 6);
    DiscreteBeliefMdp::new(
        vec![
            vec![a(1.0, vec![(1, 0.5), (2, 0.5)]), a(2.0, vec![(3, 1.0)]), a(0.5, vec![(4, 1.0)])],
            vec![a(2.0, vec![(g, 1.0)]), a(1.0, vec![(g, 0.8), (f, 0.2)])],
            vec![a(3.0, vec![(g, 1.0)]), a(1.0, vec![(3, 1.0)])],
            vec![a(2.0, vec![(g, 0.95), (f, 0.05)]), a(4.0, vec![(g, 1.0)])],
            vec![a(1.0, vec![(g, 0.7), (f, 0.3)]), a(6.0, vec![(g, 1.0)])],
            vec![],
            vec![],
        ],
        vec![false, false, false, false, false, true, false],
        vec![false, false, false, false, false, false, true],
    )
    .expect("valid instance")
}
