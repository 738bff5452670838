//! LQG synthesis: Riccati solvers, node stabilizers and edge trackers.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::beliefs::{symmetrize, wrap_angle, Control, GaussianBelief, Mat3, State, Vec3};
use crate::models::{linearize, MotionModel, ObservationModel};
use crate::world::Environment;

pub const RICCATI_TOL: f64 = 1e-8;
pub const RICCATI_MAX_ITERS: usize = 10_000;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ControlError {
    #[error("Riccati iteration did not converge ({0})")]
    DareNotConverged(String),
    #[error("closed loop is unstable (spectral radius {0})")]
    Unstable(f64),
    #[error("filter covariance does not converge at ({x:.3}, {y:.3}): state not detectable")]
    FilterNotConverged { x: f64, y: f64 },
    #[error("straight edge from ({0:.3}, {1:.3}) to ({2:.3}, {3:.3}) collides")]
    EdgeCollides(f64, f64, f64, f64),
    #[error("target ({0:.3}, {1:.3}) is in collision")]
    TargetCollides(f64, f64),
}

/// Quadratic state and control weights for the regulator.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LqgWeights {
    pub wx: f64,
    pub wu: f64,
}

impl Default for LqgWeights {
    fn default() -> Self {
        Self { wx: 1.0, wu: 0.1 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DareSolution {
    pub gain: Mat3,
    pub cost: Mat3,
    pub residual: f64,
    pub spectral_radius: f64,
}

fn riccati_map(a: &Mat3, b: &Mat3, wx: &Mat3, wu: &Mat3, s: &Mat3) -> Option<(Mat3, Mat3)> {
    let bts = b.transpose() * s;
    let gain = (wu + bts * b).try_inverse()? * bts * a;
    let next = wx + a.transpose() * s * a - a.transpose() * s * b * gain;
    Some((symmetrize(&next), gain))
}

pub fn spectral_radius(m: &Mat3) -> f64 {
    m.complex_eigenvalues().iter().map(|c| c.norm()).fold(0.0, f64::max)
}

/// Solves the control Riccati equation by fixed-point iteration from `S = Wx`.
pub fn solve_dare(a: &Mat3, b: &Mat3, wx: &Mat3, wu: &Mat3) -> Result<DareSolution, ControlError> {
    let mut s = *wx;
    for _ in 0..RICCATI_MAX_ITERS {
        let (next, _) = riccati_map(a, b, wx, wu, &s)
            .ok_or_else(|| ControlError::DareNotConverged("singular control weighting".into()))?;
        if !next.iter().all(|v| v.is_finite()) {
            return Err(ControlError::DareNotConverged("diverged".into()));
        }
        let delta = (next - s).norm();
        s = next;
        if delta < RICCATI_TOL * 1e-2 {
            break;
        }
    }
    let (next, gain) = riccati_map(a, b, wx, wu, &s).expect("checked above");
    let residual = (next - s).norm();
    if residual >= RICCATI_TOL {
        return Err(ControlError::DareNotConverged(format!("residual {residual:e}")));
    }
    let rho = spectral_radius(&(a - b * gain));
    if rho >= 1.0 {
        return Err(ControlError::Unstable(rho));
    }
    Ok(DareSolution { gain, cost: s, residual, spectral_radius: rho })
}

/// Feedback gain shared by all stabilizers and trackers of the holonomic model.
pub fn tracking_gain(motion: &MotionModel, w: &LqgWeights) -> Result<DareSolution, ControlError> {
    solve_dare(
        &motion.jacobian(),
        &motion.control_jacobian(),
        &(Mat3::identity() * w.wx),
        &(Mat3::identity() * w.wu),
    )
}

/// One predict-then-update step of the covariance recursion, `m = H^T R^-1 H`.
pub fn filter_riccati_step(a: &Mat3, qw: &Mat3, m: &Mat3, p: &Mat3) -> Mat3 {
    let prior = a * p * a.transpose() + qw;
    let post = (Mat3::identity() + prior * m).try_inverse().map(|inv| inv * prior).unwrap_or(prior);
    symmetrize(&post)
}

/// Stationary posterior covariance of the filter (doubling iteration, then
/// plain fixed-point polishing).
pub fn stationary_filter_covariance(
    a: &Mat3,
    h: &DMatrix<f64>,
    qw: &Mat3,
    r: &DMatrix<f64>,
) -> Option<Mat3> {
    let m = if h.nrows() == 0 {
        Mat3::zeros()
    } else {
        let rinv = r.clone().try_inverse()?;
        let full = h.transpose() * rinv * h;
        Mat3::from_fn(|i, j| full[(i, j)])
    };
    stationary_from_information(a, qw, &m)
}

/// As [`stationary_filter_covariance`] with the information matrix given directly.
pub fn stationary_from_information(a: &Mat3, qw: &Mat3, m: &Mat3) -> Option<Mat3> {
    // Prior-form equation X = A X (I + M X)^-1 A^T + Q solved by structure-preserving doubling.
    let (mut ak, mut gk, mut hk) = (a.transpose(), *m, *qw);
    for _ in 0..64 {
        let inv = (Mat3::identity() + gk * hk).try_inverse()?;
        let a_next = ak * inv * ak;
        let g_next = symmetrize(&(gk + ak * inv * gk * ak.transpose()));
        let h_next = symmetrize(&(hk + ak.transpose() * hk * inv * ak));
        let delta = (h_next - hk).norm();
        (ak, gk, hk) = (a_next, g_next, h_next);
        if !hk.iter().all(|v| v.is_finite()) || hk.norm() > 1e12 {
            return None;
        }
        if delta <= 1e-15 * (1.0 + hk.norm()) {
            break;
        }
    }
    let mut p = (Mat3::identity() + hk * m).try_inverse()? * hk;
    p = symmetrize(&p);
    for _ in 0..RICCATI_MAX_ITERS {
        let next = filter_riccati_step(a, qw, m, &p);
        let res = (next - p).norm();
        p = next;
        if res < RICCATI_TOL * 1e-2 {
            break;
        }
    }
    let residual = (filter_riccati_step(a, qw, m, &p) - p).norm();
    (residual < RICCATI_TOL && p.iter().all(|v| v.is_finite())).then_some(p)
}

/// Node stabilizer: regulates the belief mean to `target`, whose stationary
/// filter covariance defines the node's center belief.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StationaryLqg {
    pub target: State,
    pub gain: Mat3,
    pub kalman_gain: DMatrix<f64>,
    pub p_c: Mat3,
    pub spectral_radius: f64,
}

impl StationaryLqg {
    pub fn center(&self) -> GaussianBelief {
        GaussianBelief { mean: self.target, cov: self.p_c }
    }

    pub fn apply(&self, b: &GaussianBelief, motion: &MotionModel) -> Control {
        let err = b.mean.error_to(&self.target);
        motion.clamp(&Control::from_vector(&(-self.gain * err))).0
    }
}

pub fn make_node_controller(
    v: &State,
    env: &Environment,
    motion: &MotionModel,
    obs: &ObservationModel,
    dare: &DareSolution,
) -> Result<StationaryLqg, ControlError> {
    if env.collides(v, None) {
        return Err(ControlError::TargetCollides(v.x, v.y));
    }
    let lin = linearize(v, &Control::zero(), &env.landmarks, motion, obs);
    let m = lin.information();
    let p_c = stationary_from_information(&lin.a, &lin.qw, &m)
        .ok_or(ControlError::FilterNotConverged { x: v.x, y: v.y })?;
    let prior = lin.a * p_c * lin.a.transpose() + lin.qw;
    let kalman_gain = if lin.h.nrows() == 0 {
        DMatrix::zeros(3, 0)
    } else {
        let p = DMatrix::from_fn(3, 3, |i, j| prior[(i, j)]);
        let s = &lin.h * &p * lin.h.transpose() + DMatrix::from_diagonal(&lin.r_diag);
        match s.try_inverse() {
            Some(si) => p * lin.h.transpose() * si,
            None => return Err(ControlError::FilterNotConverged { x: v.x, y: v.y }),
        }
    };
    Ok(StationaryLqg { target: *v, gain: dare.gain, kalman_gain, p_c, spectral_radius: dare.spectral_radius })
}

/// Straight-line tracker from `from` to `to` at constant speed followed by
/// regulation at `to`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EdgeController {
    pub from: State,
    pub to: State,
    pub n_steps: usize,
    /// Nominal state change per step (heading component already wrapped).
    pub step: Vec3,
    pub gain: Mat3,
}

impl EdgeController {
    pub fn nominal_state(&self, k: usize) -> State {
        if k >= self.n_steps {
            return self.to;
        }
        self.from.offset(&(self.step * k as f64))
    }

    pub fn nominal_control(&self, k: usize, dt: f64) -> Control {
        if k >= self.n_steps {
            Control::zero()
        } else {
            Control::from_vector(&(self.step / dt))
        }
    }

    /// Nominal states and controls, `n_steps + 1` states.
    pub fn nominal(&self, dt: f64) -> Vec<(State, Control)> {
        (0..=self.n_steps).map(|k| (self.nominal_state(k), self.nominal_control(k, dt))).collect()
    }

    pub fn apply(&self, b: &GaussianBelief, k: usize, motion: &MotionModel) -> Control {
        let err = b.mean.error_to(&self.nominal_state(k));
        let u = self.nominal_control(k, motion.dt).to_vector() - self.gain * err;
        motion.clamp(&Control::from_vector(&u)).0
    }
}

/// Number of full-speed steps needed to cover the pose change `d`: the
/// planar speed and the turn rate both stay within `v_max`.
pub fn steps_for(d: &Vec3, motion: &MotionModel) -> usize {
    let n = d.xy().norm().max(d[2].abs()) / motion.step_length();
    (n - 1e-9).ceil().max(0.0) as usize
}

pub fn make_edge_controller(
    vi: &State,
    vj: &State,
    env: &Environment,
    motion: &MotionModel,
    dare: &DareSolution,
) -> Result<EdgeController, ControlError> {
    if env.collides(vi, Some(vj)) {
        return Err(ControlError::EdgeCollides(vi.x, vi.y, vj.x, vj.y));
    }
    Ok(edge_controller_unchecked(vi, vj, motion, dare))
}

/// Edge tracker without the collision check (used for in-search menus).
pub fn edge_controller_unchecked(vi: &State, vj: &State, motion: &MotionModel, dare: &DareSolution) -> EdgeController {
    let d = Vec3::new(vj.x - vi.x, vj.y - vi.y, wrap_angle(vj.theta - vi.theta));
    let n_steps = steps_for(&d, motion);
    let step = if n_steps == 0 { Vec3::zeros() } else { d / n_steps as f64 };
    EdgeController { from: *vi, to: *vj, n_steps, step, gain: dare.gain }
}

/// Noise-free closed-loop rollout of the belief mean under a tracker, mainly for tests and costs.
pub fn noiseless_track(ctrl: &EdgeController, start: &State, motion: &MotionModel, steps: usize) -> Vec<State> {
    let mut x = *start;
    let mut out = vec![x];
    let cov = Mat3::zeros();
    for k in 0..steps {
        let u = ctrl.apply(&GaussianBelief { mean: x, cov }, k, motion);
        x = motion.propagate_mean(&x, &u);
        out.push(x);
    }
    out
}
