//! Monte Carlo belief-tree search with UCT action selection, shared by the
//! graph-bridged planner and the roadmap baseline.

use rand::RngCore;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Terminal {
    Goal,
    Failure,
}

#[derive(Debug, Clone)]
pub struct Transition<S, B> {
    pub next_state: S,
    pub next_belief: B,
    pub cost: f64,
    pub terminal: Option<Terminal>,
}

/// How a simulated return is folded into action values.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackupRule {
    /// `R = c + J(b')`, bootstrapping on the child's value.
    JBootstrap,
    /// `R = c + R'`, the sampled return of the rest of the simulation.
    MonteCarloReturn,
}

/// Problem interface of the search.
pub trait SearchDomain {
    type State: Clone;
    type Belief: Clone;
    type Action: Clone;

    fn sample_state(&self, b: &Self::Belief, rng: &mut dyn RngCore) -> Self::State;
    /// Actions available at `b` with their initial values, in tie-break order.
    fn menu(&self, b: &Self::Belief) -> Vec<(Self::Action, f64)>;
    fn step(&self, x: &Self::State, b: &Self::Belief, a: &Self::Action, rng: &mut dyn RngCore) -> Transition<Self::State, Self::Belief>;
    /// Sampled cost-to-go from `(x, b)` at depth `k`; `prev` is the action that led here.
    fn rollout(&self, x: &Self::State, b: &Self::Belief, k: usize, prev: Option<&Self::Action>, rng: &mut dyn RngCore) -> f64;
    fn distance(&self, a: &Self::Belief, b: &Self::Belief) -> f64;
    /// Actions that keep the robot where it is; avoided at the root when possible.
    fn is_stay(&self, _b: &Self::Belief, _a: &Self::Action) -> bool {
        false
    }
    fn j_fail(&self) -> f64;
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SearchConfig {
    pub n_sims: usize,
    pub horizon: usize,
    pub eta_q: f64,
    pub delta_match: f64,
    pub backup: BackupRule,
}

impl Default for SearchConfig {
    fn default() -> Self {
        Self { n_sims: 500, horizon: 30, eta_q: 1.0, delta_match: 0.1, backup: BackupRule::JBootstrap }
    }
}

#[derive(Debug, Clone)]
pub struct ActionSlot<A> {
    pub action: A,
    pub q: f64,
    pub n: u64,
    pub children: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct TreeNode<B, A> {
    pub belief: B,
    pub n: u64,
    pub j: f64,
    pub actions: Vec<ActionSlot<A>>,
}

#[derive(Debug, Clone)]
pub struct BeliefTree<B, A> {
    pub nodes: Vec<TreeNode<B, A>>,
    pub root: Option<usize>,
}

impl<B, A> Default for BeliefTree<B, A> {
    fn default() -> Self {
        Self { nodes: Vec::new(), root: None }
    }
}

/// Violation found by [`BeliefTree::check_invariants`].
#[derive(Debug, Clone, PartialEq)]
pub enum TreeViolation {
    ValueNotMin { node: usize, j: f64, min_q: f64 },
    CountMismatch { node: usize, n: u64, sum: u64 },
}

impl<B: Clone, A: Clone> BeliefTree<B, A> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn root_node(&self) -> Option<&TreeNode<B, A>> {
        self.root.map(|r| &self.nodes[r])
    }

    fn new_node<D>(&mut self, domain: &D, b: &B) -> usize
    where
        D: SearchDomain<Belief = B, Action = A>,
    {
        let actions: Vec<ActionSlot<A>> = domain
            .menu(b)
            .into_iter()
            .map(|(action, q)| ActionSlot { action, q, n: 0, children: Vec::new() })
            .collect();
        let j = actions.iter().map(|s| s.q).fold(f64::INFINITY, f64::min);
        let j = if actions.is_empty() { domain.j_fail() } else { j };
        self.nodes.push(TreeNode { belief: b.clone(), n: 0, j, actions });
        self.nodes.len() - 1
    }

    fn select(&self, node: usize, eta_q: f64) -> usize {
        let nd = &self.nodes[node];
        if let Some(i) = nd.actions.iter().position(|s| s.n == 0) {
            return i;
        }
        let ln_n = (nd.n.max(1) as f64).ln();
        let mut best = (f64::INFINITY, 0);
        for (i, s) in nd.actions.iter().enumerate() {
            let score = s.q - eta_q * (ln_n / s.n as f64).sqrt();
            if score < best.0 {
                best = (score, i);
            }
        }
        best.1
    }

    fn simulate<D>(&mut self, domain: &D, cfg: &SearchConfig, x: &D::State, node: usize, k: usize, prev: Option<&A>, rng: &mut dyn RngCore) -> f64
    where
        D: SearchDomain<Belief = B, Action = A>,
    {
        if k > cfg.horizon {
            return domain.rollout(x, &self.nodes[node].belief, k, prev, rng);
        }
        if self.nodes[node].actions.is_empty() {
            return domain.j_fail();
        }
        let ai = self.select(node, cfg.eta_q);
        let action = self.nodes[node].actions[ai].action.clone();
        let t = domain.step(x, &self.nodes[node].belief, &action, rng);
        let ret = match t.terminal {
            Some(Terminal::Goal) => t.cost,
            Some(Terminal::Failure) => t.cost + domain.j_fail(),
            None => {
                let matched = self.nodes[node].actions[ai]
                    .children
                    .iter()
                    .map(|&c| (domain.distance(&self.nodes[c].belief, &t.next_belief), c))
                    .filter(|(d, _)| *d <= cfg.delta_match)
                    .min_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)))
                    .map(|(_, c)| c);
                let value = match matched {
                    Some(c) => self.simulate(domain, cfg, &t.next_state, c, k + 1, Some(&action), rng),
                    None => {
                        let c = self.new_node(domain, &t.next_belief);
                        self.nodes[node].actions[ai].children.push(c);
                        domain.rollout(&t.next_state, &t.next_belief, k + 1, Some(&action), rng)
                    }
                };
                t.cost + value
            }
        };
        let nd = &mut self.nodes[node];
        nd.n += 1;
        let slot = &mut nd.actions[ai];
        slot.n += 1;
        slot.q += (ret - slot.q) / slot.n as f64;
        nd.j = nd.actions.iter().map(|s| s.q).fold(f64::INFINITY, f64::min);
        match cfg.backup {
            BackupRule::JBootstrap => nd.j,
            BackupRule::MonteCarloReturn => ret,
        }
    }

    /// Makes the root match `b`, reusing it when it already does.
    pub fn ensure_root<D>(&mut self, domain: &D, b: &B, cfg: &SearchConfig) -> bool
    where
        D: SearchDomain<Belief = B, Action = A>,
    {
        match self.root {
            Some(r) if domain.distance(&self.nodes[r].belief, b) <= cfg.delta_match => true,
            _ => {
                self.nodes.clear();
                self.root = None;
                false
            }
        }
    }

    /// Runs `cfg.n_sims` simulations from the root belief `b` and returns the
    /// greedy root action index, or `None` when the root has no actions.
    pub fn search<D>(&mut self, domain: &D, b: &B, cfg: &SearchConfig, rng: &mut dyn RngCore) -> Option<usize>
    where
        D: SearchDomain<Belief = B, Action = A>,
    {
        self.ensure_root(domain, b, cfg);
        for _ in 0..cfg.n_sims {
            match self.root {
                None => {
                    // the first visit creates the root and returns a rollout, like any new node
                    let x = domain.sample_state(b, rng);
                    let r = self.new_node(domain, b);
                    self.root = Some(r);
                    domain.rollout(&x, b, 0, None, rng);
                }
                Some(r) => {
                    let belief = self.nodes[r].belief.clone();
                    let x = domain.sample_state(&belief, rng);
                    self.simulate(domain, cfg, &x, r, 0, None, rng);
                }
            }
        }
        if self.root.is_none() {
            let r = self.new_node(domain, b);
            self.root = Some(r);
        }
        self.best_root_action(domain)
    }

    /// Greedy root choice: lowest Q, ties to the lowest index; stay actions
    /// only when nothing else has a finite value.
    pub fn best_root_action<D>(&self, domain: &D) -> Option<usize>
    where
        D: SearchDomain<Belief = B, Action = A>,
    {
        let root = &self.nodes[self.root?];
        let argmin = |skip_stay: bool| {
            let mut best: Option<(f64, usize)> = None;
            for (i, s) in root.actions.iter().enumerate() {
                if skip_stay && domain.is_stay(&root.belief, &s.action) {
                    continue;
                }
                if best.is_none_or(|(q, _)| s.q < q) {
                    best = Some((s.q, i));
                }
            }
            best
        };
        let moving = argmin(true);
        match moving {
            Some((q, i)) if q.is_finite() => Some(i),
            _ => argmin(false).map(|(_, i)| i),
        }
    }

    /// After executing root action `ai` and reaching belief `b`, keeps the
    /// matching child's subtree as the new root; otherwise clears the tree.
    pub fn advance<D>(&mut self, domain: &D, ai: usize, b: &B, cfg: &SearchConfig) -> bool
    where
        D: SearchDomain<Belief = B, Action = A>,
    {
        let Some(r) = self.root else { return false };
        let child = self.nodes[r]
            .actions
            .get(ai)
            .into_iter()
            .flat_map(|s| s.children.iter())
            .map(|&c| (domain.distance(&self.nodes[c].belief, b), c))
            .filter(|(d, _)| *d <= cfg.delta_match)
            .min_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)))
            .map(|(_, c)| c);
        match child {
            Some(c) => {
                self.reroot(c);
                true
            }
            None => {
                self.nodes.clear();
                self.root = None;
                false
            }
        }
    }

    /// Keeps only the subtree under `new_root`, renumbering nodes.
    fn reroot(&mut self, new_root: usize) {
        let mut map = vec![usize::MAX; self.nodes.len()];
        let mut order = vec![new_root];
        map[new_root] = 0;
        let mut i = 0;
        while i < order.len() {
            let n = order[i];
            for s in &self.nodes[n].actions {
                for &c in &s.children {
                    if map[c] == usize::MAX {
                        map[c] = order.len();
                        order.push(c);
                    }
                }
            }
            i += 1;
        }
        let mut old: Vec<Option<TreeNode<B, A>>> = std::mem::take(&mut self.nodes).into_iter().map(Some).collect();
        self.nodes = order
            .iter()
            .map(|&o| {
                let mut nd = old[o].take().expect("each node kept once");
                for s in &mut nd.actions {
                    for c in &mut s.children {
                        *c = map[*c];
                    }
                }
                nd
            })
            .collect();
        self.root = Some(0);
    }

    /// Checks `J = min Q` and `N = sum N_a` at every node.
    pub fn check_invariants(&self) -> Result<(), TreeViolation> {
        for (i, nd) in self.nodes.iter().enumerate() {
            let sum: u64 = nd.actions.iter().map(|s| s.n).sum();
            if sum != nd.n {
                return Err(TreeViolation::CountMismatch { node: i, n: nd.n, sum });
            }
            if !nd.actions.is_empty() {
                let min_q = nd.actions.iter().map(|s| s.q).fold(f64::INFINITY, f64::min);
                if nd.j != min_q {
                    return Err(TreeViolation::ValueNotMin { node: i, j: nd.j, min_q });
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Deterministic chain: states 0..len, action 0 advances with cost `costs[s]`;
    /// optional action 1 stays at cost `stay_cost`.
    struct Chain {
        costs: Vec<f64>,
        with_stay: bool,
        terminal_value: f64,
    }

    impl SearchDomain for Chain {
        type State = usize;
        type Belief = usize;
        type Action = usize;

        fn sample_state(&self, b: &usize, _: &mut dyn RngCore) -> usize {
            *b
        }
        fn menu(&self, b: &usize) -> Vec<(usize, f64)> {
            if *b >= self.costs.len() {
                return vec![];
            }
            let mut m = vec![(0, 0.0)];
            if self.with_stay {
                m.push((1, 0.0));
            }
            m
        }
        fn step(&self, x: &usize, _: &usize, a: &usize, _: &mut dyn RngCore) -> Transition<usize, usize> {
            if *a == 1 {
                return Transition { next_state: *x, next_belief: *x, cost: 1.0, terminal: None };
            }
            let last = *x + 1 == self.costs.len();
            Transition { next_state: *x + 1, next_belief: *x + 1, cost: self.costs[*x], terminal: last.then_some(Terminal::Goal) }
        }
        fn rollout(&self, x: &usize, _: &usize, _: usize, _: Option<&usize>, _: &mut dyn RngCore) -> f64 {
            self.costs[*x..].iter().sum::<f64>() + self.terminal_value
        }
        fn distance(&self, a: &usize, b: &usize) -> f64 {
            if a == b { 0.0 } else { f64::INFINITY }
        }
        fn is_stay(&self, _: &usize, a: &usize) -> bool {
            *a == 1
        }
        fn j_fail(&self) -> f64 {
            1e6
        }
    }

    /// Two actions with fixed random costs and an immediate goal.
    struct Bandit {
        means: [f64; 2],
        fail_prob: [f64; 2],
    }

    impl SearchDomain for Bandit {
        type State = ();
        type Belief = ();
        type Action = usize;
        fn sample_state(&self, _: &(), _: &mut dyn RngCore) {}
        fn menu(&self, _: &()) -> Vec<(usize, f64)> {
            vec![(0, 0.0), (1, 0.0)]
        }
        fn step(&self, _: &(), _: &(), a: &usize, rng: &mut dyn RngCore) -> Transition<(), ()> {
            let fail = rng.random::<f64>() < self.fail_prob[*a];
            let cost = self.means[*a] + rng.random_range(-0.5..0.5);
            Transition { next_state: (), next_belief: (), cost, terminal: Some(if fail { Terminal::Failure } else { Terminal::Goal }) }
        }
        fn rollout(&self, _: &(), _: &(), _: usize, _: Option<&usize>, _: &mut dyn RngCore) -> f64 {
            0.0
        }
        fn distance(&self, _: &(), _: &()) -> f64 {
            0.0
        }
        fn j_fail(&self) -> f64 {
            100.0
        }
    }

    fn cfg(n: usize, backup: BackupRule) -> SearchConfig {
        SearchConfig { n_sims: n, horizon: 10, eta_q: 0.0, delta_match: 0.1, backup }
    }

    #[test]
    fn deterministic_chain_converges_to_path_cost() {
        let d = Chain { costs: vec![2.0, 3.0], with_stay: false, terminal_value: 0.0 };
        for backup in [BackupRule::JBootstrap, BackupRule::MonteCarloReturn] {
            let mut t = BeliefTree::new();
            let mut rng = ChaCha8Rng::seed_from_u64(0);
            assert_eq!(t.search(&d, &0, &cfg(5, backup), &mut rng), Some(0));
            assert_eq!(t.root_node().unwrap().actions[0].q, 5.0);
            t.check_invariants().unwrap();
        }
    }

    #[test]
    fn root_count_excludes_the_creating_visit() {
        let d = Bandit { means: [5.0, 7.0], fail_prob: [0.0, 0.0] };
        let mut t = BeliefTree::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        t.search(&d, &(), &SearchConfig { n_sims: 50, eta_q: 1.0, ..cfg(50, BackupRule::JBootstrap) }, &mut rng);
        let root = t.root_node().unwrap();
        assert_eq!(root.n, 49);
        assert_eq!(root.actions.iter().map(|s| s.n).sum::<u64>(), 49);
    }

    #[test]
    fn greedy_choice_prefers_lower_q() {
        let d = Bandit { means: [5.0, 7.0], fail_prob: [0.0, 0.0] };
        let mut t = BeliefTree::new();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        assert_eq!(t.search(&d, &(), &SearchConfig { eta_q: 3.0, ..cfg(200, BackupRule::JBootstrap) }, &mut rng), Some(0));
        let r = t.root_node().unwrap();
        assert!(r.actions[0].n > 0 && r.actions[1].n > 0);
    }

    #[test]
    fn pure_exploitation_sticks_with_the_better_action() {
        let mut t: BeliefTree<(), usize> = BeliefTree::new();
        t.nodes.push(TreeNode {
            belief: (),
            n: 2,
            j: 1.0,
            actions: vec![
                ActionSlot { action: 0, q: 1.0, n: 1, children: vec![] },
                ActionSlot { action: 1, q: 2.0, n: 1, children: vec![] },
            ],
        });
        for _ in 0..10 {
            assert_eq!(t.select(0, 0.0), 0);
        }
    }

    #[test]
    fn failure_mixes_j_fail_into_the_running_mean() {
        let d = Bandit { means: [1.0, 1.0], fail_prob: [1.0, 1.0] };
        let mut t = BeliefTree::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        t.search(&d, &(), &cfg(2, BackupRule::JBootstrap), &mut rng);
        let q = t.root_node().unwrap().actions[0].q;
        assert!(q >= 100.0 + 0.5);
    }

    #[test]
    fn stay_action_is_not_chosen_while_others_are_finite() {
        let d = Chain { costs: vec![1.0; 3], with_stay: true, terminal_value: 0.0 };
        let mut t = BeliefTree::new();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut c = cfg(3, BackupRule::MonteCarloReturn);
        c.eta_q = 1.0;
        // make staying look cheapest by value
        t.search(&d, &0, &c, &mut rng);
        let r = t.root.unwrap();
        t.nodes[r].actions[1].q = -1.0;
        assert_eq!(t.best_root_action(&d), Some(0));
        t.nodes[r].actions[0].q = f64::INFINITY;
        assert_eq!(t.best_root_action(&d), Some(1));
    }

    #[test]
    fn empty_menu_yields_no_action() {
        let d = Chain { costs: vec![], with_stay: false, terminal_value: 0.0 };
        let mut t = BeliefTree::new();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        assert_eq!(t.search(&d, &0, &cfg(10, BackupRule::JBootstrap), &mut rng), None);
    }

    #[test]
    fn reuse_keeps_the_matching_subtree() {
        let d = Chain { costs: vec![1.0; 8], with_stay: false, terminal_value: 0.0 };
        let c = cfg(20, BackupRule::JBootstrap);
        let mut reused = BeliefTree::new();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut b = 0;
        while b < 7 {
            let a = reused.search(&d, &b, &c, &mut rng).unwrap();
            let mut fresh = BeliefTree::new();
            assert_eq!(fresh.search(&d, &b, &c, &mut ChaCha8Rng::seed_from_u64(9)), Some(a));
            b += 1;
            reused.advance(&d, a, &b, &c);
            reused.check_invariants().unwrap();
            if let Some(r) = reused.root_node() {
                assert_eq!(r.belief, b);
            }
        }
    }

    #[test]
    fn invariants_hold_under_random_use() {
        let d = Bandit { means: [3.0, 2.5], fail_prob: [0.1, 0.3] };
        let mut t = BeliefTree::new();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..50 {
            t.search(&d, &(), &SearchConfig { eta_q: 5.0, ..cfg(20, BackupRule::JBootstrap) }, &mut rng);
            t.check_invariants().unwrap();
        }
    }
}
