//! Acceptance checks, one PASS/FAIL line each.
//!
//! `ACCEPTANCE=1,4,9 cargo test -p bvl-core --test acceptance` runs a subset.
//! The benchmark checks (5 to 8) replay the configs in `configs/` and take
//! tens of minutes on one core.

use std::path::PathBuf;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use bvl_core::beliefs::{ekf_step, wrap_angle, Control, GaussianBelief, State};
use bvl_core::controllers::{filter_riccati_step, make_node_controller, solve_dare, spectral_radius, tracking_gain, LqgWeights};
use bvl_core::episode::Outcome;
use bvl_core::experiment::{compute_scores, metrics_csv, run_batch, run_sweep, ExperimentConfig, MetricsRow, PlannerKind, Prepared, SweepAxis};
use bvl_core::firm::{value_iteration, EdgeStats};
use bvl_core::models::{linearize, Models, Observation, Reading};
use bvl_core::oracle::{
    enumerate_optimal, expectimax_action, from_graph, risk_tradeoff_instance, two_stage_instance, DiscreteBeliefMdp, MdpSearchDomain,
};
use bvl_core::search::{BackupRule, BeliefTree, SearchConfig};
use bvl_core::world::generate_rnp_with;
use nalgebra::Matrix3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn config(name: &str) -> ExperimentConfig {
    let path = PathBuf::from(concat!(env!("CARGO_MANIFEST_DIR"), "/../../configs")).join(name);
    ExperimentConfig::load(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}

struct Check {
    pass: bool,
    detail: String,
}

fn check(pass: bool, detail: String) -> Check {
    Check { pass, detail }
}

fn run(id: u32, what: &str, budget: Duration, f: impl FnOnce() -> Check) -> bool {
    let t = Instant::now();
    let c = f();
    let el = t.elapsed();
    let pass = c.pass && el <= budget;
    println!(
        "{} {id} {what}: {} [{:.1} s of {} s]",
        if pass { "PASS" } else { "FAIL" },
        c.detail,
        el.as_secs_f64(),
        budget.as_secs()
    );
    pass
}

fn mean(v: &[f64]) -> Option<f64> {
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

fn median(mut v: Vec<f64>) -> Option<f64> {
    if v.is_empty() {
        return None;
    }
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) })
}

fn of<'a>(rows: &'a [MetricsRow], planner: &str, axis_value: Option<f64>) -> Vec<&'a MetricsRow> {
    rows.iter().filter(|r| r.planner == planner && (axis_value.is_none() || r.axis_value == axis_value)).collect()
}

fn collisions(rows: &[&MetricsRow]) -> usize {
    rows.iter().filter(|r| r.outcome == Outcome::Collision).count()
}

/// Steps to the goal with episodes that never got there counted as `cap`.
fn median_steps_censored(rows: &[&MetricsRow], cap: usize) -> Option<f64> {
    median(rows.iter().map(|r| if r.is_success() { r.steps } else { cap } as f64).collect())
}

fn mean_goal_cost(rows: &[&MetricsRow]) -> Option<f64> {
    mean(&rows.iter().filter(|r| r.is_success()).map(|r| r.total_cost).collect::<Vec<_>>())
}

fn fmt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.3}")).unwrap_or_else(|| "none".into())
}

/// Random graph over `n` nodes with goal 0, out-degree at most 3 and at
/// most `max_policies` deterministic policies.
fn random_graph(n: usize, max_policies: u64, rng: &mut ChaCha8Rng) -> Vec<EdgeStats> {
    let mut deg: Vec<usize> = (0..n).map(|i| if i == 0 { 0 } else { [0, 1, 1, 2, 2, 3, 3][rng.random_range(0..7)] }).collect();
    while deg.iter().map(|&d| d.max(1) as u64).product::<u64>() > max_policies {
        let i = rng.random_range(1..n);
        if deg[i] > 1 {
            deg[i] -= 1;
        }
    }
    let mut edges = Vec::new();
    for (from, &d) in deg.iter().enumerate() {
        let mut targets: Vec<usize> = (0..n).filter(|&t| t != from).collect();
        for k in 0..d {
            let j = rng.random_range(k..targets.len());
            targets.swap(k, j);
            let p_success = if rng.random_bool(0.5) { 1.0 } else { rng.random_range(0.5..1.0) };
            edges.push(EdgeStats { from, to: targets[k], cost: rng.random_range(0.5..5.0), p_success });
        }
    }
    edges
}

fn risk_limit() -> Check {
    let m = risk_tradeoff_instance();
    let mut gaps = Vec::new();
    let mut nested = false;
    for j_fail in [1e3, 1e6, 1e9] {
        let e = enumerate_optimal(&m, j_fail).expect("enumeration");
        let gap = e.j_star.iter().zip(&e.rho_star).map(|(j, r)| (j / j_fail - r).abs()).fold(0.0, f64::max);
        gaps.push(gap);
        if j_fail == 1e9 {
            nested = e.cost_argmin_within_risk_argmin();
        }
    }
    let decreasing = gaps.windows(2).all(|w| w[1] < w[0]);
    check(
        nested && decreasing && gaps[2] < 1e-2,
        format!("cost minimizers within risk minimizers: {nested}, max |J/J_fail - rho| = {:.2e} {:.2e} {:.2e}", gaps[0], gaps[1], gaps[2]),
    )
}

fn value_iteration_matches_enumeration() -> Check {
    let j_fail = 1000.0;
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut worst: f64 = 0.0;
    let mut policies = 0;
    for _ in 0..50 {
        let edges = random_graph(30, 4096, &mut rng);
        let vi = value_iteration(30, 0, &edges, j_fail);
        let mdp = from_graph(30, 0, &edges).expect("graph mdp");
        let e = enumerate_optimal(&mdp, j_fail).expect("enumeration");
        policies += e.n_policies;
        for s in 0..30 {
            worst = worst.max((vi.j[s] - e.j_star[s]).abs());
        }
    }
    check(worst <= 1e-9, format!("50 graphs, {policies} policies, max |J_vi - J*| = {worst:.2e}"))
}

fn search_matches_expectimax() -> Check {
    let m = two_stage_instance();
    let j_fail = 100.0;
    let guide = vec![0.0; m.len()];
    let best = expectimax_action(&m, 0, 6, &guide, j_fail).expect("expectimax").action;
    let domain = MdpSearchDomain { mdp: &m, guide, horizon: 5, eta_w: 0.05, j_fail };
    let cfg = SearchConfig { n_sims: 2000, horizon: 5, eta_q: 5.0, delta_match: 0.5, backup: BackupRule::JBootstrap };
    let hits = (0..100u64)
        .filter(|&seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            BeliefTree::new().search(&domain, &0, &cfg, &mut rng) == best
        })
        .count();
    check(hits >= 95, format!("{hits}/100 seeds pick the expectimax action {best:?}"))
}

fn random_spd(rng: &mut ChaCha8Rng) -> Matrix3<f64> {
    let l = Matrix3::from_fn(|_, _| rng.random_range(-1.0..1.0));
    l * l.transpose() + Matrix3::identity() * 0.1
}

fn controllers_and_filters() -> Check {
    let mut notes = Vec::new();
    let mut ok = true;
    let mut rng = ChaCha8Rng::seed_from_u64(5);

    let mut worst_res: f64 = 0.0;
    let mut worst_rho: f64 = 0.0;
    for _ in 0..50 {
        let a = Matrix3::from_fn(|_, _| rng.random_range(-1.0..1.0));
        let b = Matrix3::identity() + Matrix3::from_fn(|_, _| rng.random_range(-0.3..0.3));
        let s = solve_dare(&a, &b, &random_spd(&mut rng), &random_spd(&mut rng)).expect("dare");
        worst_res = worst_res.max(s.residual);
        worst_rho = worst_rho.max(spectral_radius(&(a - b * s.gain)));
    }
    let models = Models::default();
    let dare = tracking_gain(&models.motion, &LqgWeights::default()).expect("tracking gain");
    worst_res = worst_res.max(dare.residual);
    worst_rho = worst_rho.max(dare.spectral_radius);
    ok &= worst_res < 1e-8 && worst_rho < 1.0;
    notes.push(format!("DARE residual {worst_res:.1e}, closed-loop radius {worst_rho:.3}"));

    let env = generate_rnp_with(&config("infotrap.json").env, &Default::default()).expect("env");
    let obs = models.observation;
    let mut worst_jac: f64 = 0.0;
    let h = 1e-6;
    for _ in 0..200 {
        let x = State::new(rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0), rng.random_range(-3.0..3.0));
        let lm = env.landmarks.iter().nth(rng.random_range(0..env.landmarks.len())).unwrap();
        if (lm.x - x.x).hypot(lm.y - x.y) < 0.1 {
            continue;
        }
        let jac = obs.jacobian(&x, lm);
        for c in 0..3 {
            let mut d = nalgebra::Vector3::zeros();
            d[c] = h;
            let (rp, bp) = obs.predict(&x.offset(&d), lm).unwrap();
            let (rm, bm) = obs.predict(&x.offset(&-d), lm).unwrap();
            let db = wrap_angle(bp - bm);
            worst_jac = worst_jac.max(((rp - rm) / (2.0 * h) - jac[(0, c)]).abs());
            worst_jac = worst_jac.max((db / (2.0 * h) - jac[(1, c)]).abs());
        }
    }
    let mut worst_motion: f64 = 0.0;
    for _ in 0..100 {
        let x = State::new(rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0), rng.random_range(-3.0..3.0));
        let u = Control::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
        let a = models.motion.jacobian();
        for c in 0..3 {
            let mut d = nalgebra::Vector3::zeros();
            d[c] = h;
            let fp = models.motion.propagate_mean(&x.offset(&d), &u);
            let fm = models.motion.propagate_mean(&x.offset(&-d), &u);
            let diff = fp.error_to(&fm) / (2.0 * h);
            worst_motion = worst_motion.max((diff - a.column(c)).abs().max());
        }
    }
    ok &= worst_jac < 1e-5 && worst_motion < 1e-5;
    notes.push(format!("motion Jacobian vs differences {worst_motion:.1e}"));
    notes.push(format!("observation Jacobian vs differences {worst_jac:.1e}"));

    let mut worst_fix: f64 = 0.0;
    let mut worst_conv: f64 = 0.0;
    let mut gap_500: f64 = 0.0;
    let mut most_steps = 0;
    let mut nodes = 0;
    while nodes < 20 {
        let v = env.sample_free_state(&mut rng).expect("free state");
        let Ok(node) = make_node_controller(&v, &env, &models.motion, &obs, &dare) else { continue };
        nodes += 1;
        let lin = linearize(&v, &Control::zero(), &env.landmarks, &models.motion, &obs);
        let m = lin.information();
        worst_fix = worst_fix.max((filter_riccati_step(&lin.a, &lin.qw, &m, &node.p_c) - node.p_c).norm());
        // Noise-free readings keep the mean on the node, so the filter runs
        // under the node's linearization.
        let z = Observation {
            readings: env
                .landmarks
                .iter()
                .filter(|l| obs.visible(&v, l))
                .map(|l| {
                    let (range, bearing) = obs.predict(&v, l).unwrap();
                    Reading { id: l.id, range, bearing }
                })
                .collect(),
        };
        let mut b = GaussianBelief::from_diag(v, [0.05, 0.05, 0.02]).unwrap();
        let mut steps = 0;
        while steps < 20_000 && (b.cov - node.p_c).norm() >= 1e-6 {
            b = ekf_step(&b, &Control::zero(), &z, &models.motion, &obs, &env.landmarks);
            steps += 1;
            if steps == 500 {
                gap_500 = gap_500.max((b.cov - node.p_c).norm());
            }
        }
        worst_conv = worst_conv.max((b.cov - node.p_c).norm());
        most_steps = most_steps.max(steps);
    }
    ok &= worst_fix < 1e-8 && worst_conv < 1e-6;
    notes.push(format!(
        "P_c fixed-point residual {worst_fix:.1e}, filter within {worst_conv:.1e} of P_c after at most {most_steps} steps (gap at step 500 {gap_500:.1e})"
    ));
    check(ok, notes.join("; "))
}

fn tree_fuzz() -> (bool, String) {
    let j_fail = 1000.0;
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut sims = 0;
    let mut searches = 0;
    while sims < 10_000 {
        let edges = random_graph(12, u64::MAX, &mut rng);
        let mdp: DiscreteBeliefMdp = from_graph(12, 0, &edges).expect("graph mdp");
        let mut guide = value_iteration(12, 0, &edges, j_fail).j;
        guide.resize(mdp.len(), j_fail);
        let domain = MdpSearchDomain { mdp: &mdp, guide, horizon: rng.random_range(0..6), eta_w: 0.05, j_fail };
        let cfg = SearchConfig { n_sims: rng.random_range(1..60), horizon: domain.horizon, eta_q: 5.0, delta_match: 0.5, backup: BackupRule::JBootstrap };
        let mut tree = BeliefTree::new();
        let mut s = rng.random_range(1..12);
        for _ in 0..10 {
            if mdp.is_terminal(s) || mdp.actions[s].is_empty() {
                break;
            }
            let a = tree.search(&domain, &s, &cfg, &mut rng);
            sims += cfg.n_sims;
            searches += 1;
            if let Err(e) = tree.check_invariants() {
                return (false, format!("after {searches} searches: {e:?}"));
            }
            let Some(a) = a else { break };
            s = mdp.sample_next(s, a, &mut rng);
            tree.advance(&domain, a, &s, &cfg);
            if let Err(e) = tree.check_invariants() {
                return (false, format!("after advancing {searches}: {e:?}"));
            }
        }
    }
    (true, format!("{sims} simulations over {searches} searches"))
}

fn determinism() -> (bool, String) {
    let mut cfg = config("infotrap.json");
    cfg.planners = vec![PlannerKind::Bvl, PlannerKind::Urm, PlannerKind::Firm, PlannerKind::Ogr];
    cfg.n_runs = 2;
    cfg.step_cap = 300;
    cfg.firm.n_mc = 20;
    cfg.bvl.n_sims = 20;
    cfg.urm.n_sims = 20;
    let once = || metrics_csv(&run_batch(&Prepared::new(&cfg, None).expect("prepared"), 1).rows).expect("csv");
    let (a, b) = (once(), once());
    (a == b, format!("metrics.csv {} bytes, identical: {}", a.len(), a == b))
}

fn main() -> ExitCode {
    let only: Option<Vec<u32>> =
        std::env::var("ACCEPTANCE").ok().map(|s| s.split(',').filter_map(|t| t.trim().parse().ok()).collect());
    let wanted = |i: u32| only.as_ref().is_none_or(|v| v.contains(&i));
    let min = |m: u64| Duration::from_secs(60 * m);
    let mut all = true;

    if wanted(1) {
        all &= run(1, "failure-cost limit recovers minimum risk", Duration::from_secs(10), risk_limit);
    }
    if wanted(2) {
        all &= run(2, "graph value iteration equals brute force", min(1), value_iteration_matches_enumeration);
    }
    if wanted(3) {
        all &= run(3, "tree search converges to the expectimax action", min(5), search_matches_expectimax);
    }
    if wanted(4) {
        all &= run(4, "controllers and filter stationarity", Duration::from_secs(30), controllers_and_filters);
    }

    let mut infotrap_rows: Option<Vec<MetricsRow>> = None;
    if wanted(5) || wanted(8) {
        let cfg = config("infotrap.json");
        all &= run(5, "InfoTrap collisions", min(15), || {
            let rows = run_batch(&Prepared::new(&cfg, None).expect("infotrap"), 1).rows;
            let (bvl, urm) = (of(&rows, "bvl", None), of(&rows, "urm", None));
            let (cb, cu) = (collisions(&bvl), collisions(&urm));
            let p = cb as f64 / bvl.len().max(1) as f64;
            let goals = |rs: &[&MetricsRow]| rs.iter().filter(|r| r.is_success()).count();
            let c = check(
                !bvl.is_empty() && cb <= cu && p <= 0.15,
                format!(
                    "bvl {cb}/{} collisions (P = {p:.3}, {} goals), urm {cu}/{} ({} goals)",
                    bvl.len(),
                    goals(&bvl),
                    urm.len(),
                    goals(&urm)
                ),
            );
            infotrap_rows = Some(rows);
            c
        });
    }

    if wanted(6) {
        let cfg = config("obswall.json");
        all &= run(6, "ObsWall steps to goal as the wall grows", min(30), || {
            let rows = run_sweep(&cfg, SweepAxis::ObstacleO, &[10.0, 13.0, 16.0], 1, None).expect("sweep");
            let cap = cfg.step_cap;
            let b10 = median_steps_censored(&of(&rows, "bvl", Some(10.0)), cap);
            let b13 = median_steps_censored(&of(&rows, "bvl", Some(13.0)), cap);
            let b16 = median_steps_censored(&of(&rows, "bvl", Some(16.0)), cap);
            let u16 = median_steps_censored(&of(&rows, "urm", Some(16.0)), cap);
            let ratio = match (b10, b16) {
                (Some(a), Some(b)) if a > 0.0 => Some(b / a),
                _ => None,
            };
            check(
                ratio.is_some_and(|r| r <= 2.0) && matches!((u16, b16), (Some(u), Some(b)) if u > b),
                format!("bvl median steps {} / {} / {} (ratio {}), urm at o=16 {}", fmt(b10), fmt(b13), fmt(b16), fmt(ratio), fmt(u16)),
            )
        });
    }

    let mut forest_rows: Option<Vec<MetricsRow>> = None;
    if wanted(7) || wanted(8) {
        let cfg = config("forest.json");
        all &= run(7, "Forest cost against graph size", min(45), || {
            let rows = run_sweep(&cfg, SweepAxis::FirmNodes, &[350.0, 800.0], 1, None).expect("sweep");
            let cost = |p: &str, n: f64| mean_goal_cost(&of(&rows, p, Some(n)));
            let (b350, b800, f350, f800) = (cost("bvl", 350.0), cost("bvl", 800.0), cost("firm", 350.0), cost("firm", 800.0));
            let change = |a: Option<f64>, b: Option<f64>| a.zip(b).map(|(a, b)| (b - a).abs() / a);
            let (db, df) = (change(b350, b800), change(f350, f800));
            let c = check(
                matches!((b350, f350), (Some(b), Some(f)) if b <= f) && matches!((db, df), (Some(b), Some(f)) if b < f),
                format!(
                    "mean cost bvl {} -> {}, firm {} -> {}; relative change bvl {}, firm {}",
                    fmt(b350),
                    fmt(b800),
                    fmt(f350),
                    fmt(f800),
                    fmt(db),
                    fmt(df)
                ),
            );
            forest_rows = Some(rows);
            c
        });
    }

    if wanted(8) {
        all &= run(8, "safety and optimality scores", Duration::from_secs(10), || {
            let (Some(it), Some(fo)) = (&infotrap_rows, &forest_rows) else {
                return check(false, "benchmark rows missing".into());
            };
            let fo350: Vec<MetricsRow> = fo.iter().filter(|r| r.axis_value == Some(350.0)).cloned().collect();
            let (s_it, s_fo) = (compute_scores(it).expect("scores"), compute_scores(&fo350).expect("scores"));
            let get = |s: &[bvl_core::experiment::ScoreRow], p: &str| s.iter().find(|r| r.planner == p).cloned();
            let in_range = s_it.iter().chain(&s_fo).all(|r| (0.0..=1.0).contains(&r.safety) && (0.0..=1.0).contains(&r.optimality));
            let safety = get(&s_it, "bvl").zip(get(&s_it, "urm")).map(|(b, u)| (b.safety, u.safety));
            let optimality = get(&s_fo, "bvl").zip(get(&s_fo, "firm")).map(|(b, f)| (b.optimality, f.optimality));
            check(
                in_range && safety.is_some_and(|(b, u)| b >= u) && optimality.is_some_and(|(b, f)| b >= f),
                format!("scores in [0,1]: {in_range}; InfoTrap safety bvl/urm {safety:?}; Forest optimality bvl/firm {optimality:?}"),
            )
        });
    }

    if wanted(9) {
        all &= run(9, "reproducible metrics and search-tree invariants", min(10), || {
            let (d_ok, d) = determinism();
            let (t_ok, t) = tree_fuzz();
            check(d_ok && t_ok, format!("{d}; {t}"))
        });
    }

    if all { ExitCode::SUCCESS } else { ExitCode::FAILURE }
}
