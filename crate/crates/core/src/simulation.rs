//! Closed-loop simulation of the true rover together with its filter.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::beliefs::{ekf_step, is_in_node, Control, GaussianBelief, State, Vec3};
use crate::controllers::EdgeController;
use crate::models::{generative_step, Models, Observation};
use crate::world::Environment;

#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    pub state: State,
    pub belief: GaussianBelief,
    pub observation: Observation,
    /// Cost of the belief the control was applied from.
    pub cost: f64,
    /// The swept motion of the true state hit an obstacle or left the bounds.
    pub collided: bool,
}

/// Applies `u` to the true state `x`, observes, and filters `b`.
pub fn simulate_step<R: Rng + ?Sized>(
    x: &State,
    b: &GaussianBelief,
    u: &Control,
    env: &Environment,
    models: &Models,
    rng: &mut R,
) -> StepOutcome {
    let (u, _) = models.motion.clamp(u);
    let (next, z) = generative_step(x, &u, &env.landmarks, &models.motion, &models.observation, rng);
    let collided = env.collides(x, Some(&next));
    let belief = ekf_step(b, &u, &z, &models.motion, &models.observation, &env.landmarks);
    StepOutcome { state: next, belief, observation: z, cost: models.step_cost(b), collided }
}

/// Draws a true state from a Gaussian belief.
pub fn sample_state<R: Rng + ?Sized>(b: &GaussianBelief, rng: &mut R) -> State {
    let n = Vec3::new(rng.sample(StandardNormal), rng.sample(StandardNormal), rng.sample(StandardNormal));
    let l = b.cov.cholesky().map(|c| c.l()).unwrap_or_else(|| {
        // semidefinite covariance: fall back to the symmetric square root
        let eig = b.cov.symmetric_eigen();
        let sqrt = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
        eig.eigenvectors * nalgebra::Matrix3::from_diagonal(&sqrt) * eig.eigenvectors.transpose()
    });
    b.mean.offset(&(l * n))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrackOutcome {
    Reached,
    Collision,
    Cap,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrackResult {
    pub outcome: TrackOutcome,
    pub cost: f64,
    pub steps: usize,
    pub state: State,
    pub belief: GaussianBelief,
}

/// Runs `ctrl` from step index `k0` until the belief enters the ball around
/// `target` (checked after every step), the true state collides, or `cap`
/// steps have been executed. `on_step` sees each step.
#[allow(clippy::too_many_arguments)]
pub fn track_to_node<R: Rng + ?Sized>(
    ctrl: &EdgeController,
    k0: usize,
    target: &GaussianBelief,
    epsilon: f64,
    x0: &State,
    b0: &GaussianBelief,
    cap: usize,
    env: &Environment,
    models: &Models,
    rng: &mut R,
    mut on_step: impl FnMut(&Control, &StepOutcome),
) -> TrackResult {
    let (mut x, mut b) = (*x0, *b0);
    let mut cost = 0.0;
    for i in 0..cap {
        let u = ctrl.apply(&b, k0 + i, &models.motion);
        let s = simulate_step(&x, &b, &u, env, models, rng);
        on_step(&u, &s);
        cost += s.cost;
        x = s.state;
        b = s.belief;
        if s.collided {
            return TrackResult { outcome: TrackOutcome::Collision, cost, steps: i + 1, state: x, belief: b };
        }
        if is_in_node(&b, target, epsilon, &models.metric) {
            return TrackResult { outcome: TrackOutcome::Reached, cost, steps: i + 1, state: x, belief: b };
        }
    }
    TrackResult { outcome: TrackOutcome::Cap, cost, steps: cap, state: x, belief: b }
}
