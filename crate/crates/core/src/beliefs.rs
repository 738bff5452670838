//! Gaussian beliefs over the rover pose and their Bayesian evolution.
//!
//! A belief is a mean pose plus a 3x3 covariance. The filter is an extended
//! Kalman filter: the holonomic motion model gives an identity state
//! Jacobian, and range/bearing readings are folded in one scalar row at a
//! time against a fixed linearization point, which is algebraically the
//! batch update.

use std::f64::consts::PI;

use nalgebra::{Matrix3, RowVector3, SymmetricEigen, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::models::{LandmarkSet, MotionModel, Observation, ObservationModel};

pub type Mat3 = Matrix3<f64>;
pub type Vec3 = Vector3<f64>;

/// Regularization added to a degenerate innovation variance.
pub const INNOVATION_EPS: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BeliefError {
    #[error("invalid belief: {0}")]
    Invalid(String),
}

/// Wraps an angle to (-pi, pi].
pub fn wrap_angle(a: f64) -> f64 {
    if a > -PI && a <= PI {
        return a;
    }
    let mut r = a.rem_euclid(2.0 * PI);
    if r > PI {
        r -= 2.0 * PI;
    }
    if r <= -PI {
        r += 2.0 * PI;
    }
    r
}

/// Planar pose. `theta` is kept wrapped to (-pi, pi].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct State {
    pub x: f64,
    pub y: f64,
    pub theta: f64,
}

impl State {
    pub fn new(x: f64, y: f64, theta: f64) -> Self {
        Self { x, y, theta: wrap_angle(theta) }
    }

    pub fn from_vector(v: &Vec3) -> Self {
        Self::new(v[0], v[1], v[2])
    }

    pub fn to_vector(&self) -> Vec3 {
        Vec3::new(self.x, self.y, self.theta)
    }

    /// `self - other` with the heading component wrapped.
    pub fn error_to(&self, other: &State) -> Vec3 {
        Vec3::new(self.x - other.x, self.y - other.y, wrap_angle(self.theta - other.theta))
    }

    pub fn position_distance(&self, other: &State) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }

    /// Adds a displacement and re-wraps the heading.
    pub fn offset(&self, d: &Vec3) -> Self {
        Self::new(self.x + d[0], self.y + d[1], self.theta + d[2])
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.theta.is_finite()
    }
}

/// Velocity command, one component per state axis.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Control {
    pub vx: f64,
    pub vy: f64,
    pub vtheta: f64,
}

impl Control {
    pub fn new(vx: f64, vy: f64, vtheta: f64) -> Self {
        Self { vx, vy, vtheta }
    }

    pub fn zero() -> Self {
        Self::default()
    }

    pub fn from_vector(v: &Vec3) -> Self {
        Self::new(v[0], v[1], v[2])
    }

    pub fn to_vector(&self) -> Vec3 {
        Vec3::new(self.vx, self.vy, self.vtheta)
    }

    pub fn is_finite(&self) -> bool {
        self.vx.is_finite() && self.vy.is_finite() && self.vtheta.is_finite()
    }
}

/// Gaussian belief `(mean, cov)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GaussianBelief {
    pub mean: State,
    pub cov: Mat3,
}

impl GaussianBelief {
    /// Builds a belief, symmetrizing the covariance and checking it.
    pub fn new(mean: State, cov: Mat3) -> Result<Self, BeliefError> {
        let b = Self { mean, cov: symmetrize(&cov) };
        b.validate()?;
        Ok(b)
    }

    pub fn from_diag(mean: State, diag: [f64; 3]) -> Result<Self, BeliefError> {
        Self::new(mean, Mat3::from_diagonal(&Vec3::new(diag[0], diag[1], diag[2])))
    }

    pub fn trace(&self) -> f64 {
        self.cov.trace()
    }

    pub fn validate(&self) -> Result<(), BeliefError> {
        if !self.mean.is_finite() || self.cov.iter().any(|v| !v.is_finite()) {
            return Err(BeliefError::Invalid("non-finite entries".into()));
        }
        let asym = (self.cov - self.cov.transpose()).abs().max();
        if asym > 1e-12 {
            return Err(BeliefError::Invalid(format!("covariance asymmetry {asym:e}")));
        }
        let min_eig = min_eigenvalue(&self.cov);
        if min_eig < -1e-10 {
            return Err(BeliefError::Invalid(format!("covariance eigenvalue {min_eig:e}")));
        }
        Ok(())
    }
}

pub fn symmetrize(m: &Mat3) -> Mat3 {
    (m + m.transpose()) * 0.5
}

pub fn min_eigenvalue(m: &Mat3) -> f64 {
    SymmetricEigen::new(symmetrize(m)).eigenvalues.min()
}

/// Weights of the per-step cost `xi_p * tr(P) + xi_t * dt`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostWeights {
    pub xi_p: f64,
    pub xi_t: f64,
    pub dt: f64,
}

impl Default for CostWeights {
    fn default() -> Self {
        Self { xi_p: 10.0, xi_t: 1.0, dt: 0.005 }
    }
}

pub fn step_cost(b: &GaussianBelief, w: &CostWeights) -> f64 {
    w.xi_p * b.trace() + w.xi_t * w.dt
}

/// Composite belief metric: weighted mean distance plus a scaled Frobenius
/// distance between covariances.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BeliefMetric {
    pub w_x: f64,
    pub w_y: f64,
    /// meters per radian
    pub w_theta: f64,
    pub xi_sigma: f64,
}

impl Default for BeliefMetric {
    fn default() -> Self {
        Self { w_x: 1.0, w_y: 1.0, w_theta: 0.5, xi_sigma: 1.0 }
    }
}

impl BeliefMetric {
    pub fn mean_distance(&self, a: &State, b: &State) -> f64 {
        let e = a.error_to(b);
        ((self.w_x * e[0]).powi(2) + (self.w_y * e[1]).powi(2) + (self.w_theta * e[2]).powi(2))
            .sqrt()
    }

    /// Lower bound of `distance` from positions alone.
    pub fn position_lower_bound(&self, a: &State, b: &State) -> f64 {
        self.w_x.min(self.w_y) * a.position_distance(b)
    }
}

pub fn belief_distance(a: &GaussianBelief, b: &GaussianBelief, metric: &BeliefMetric) -> f64 {
    metric.mean_distance(&a.mean, &b.mean) + metric.xi_sigma * (a.cov - b.cov).norm()
}

/// Closed ball membership `||b - center|| <= epsilon`.
pub fn is_in_node(
    b: &GaussianBelief,
    center: &GaussianBelief,
    epsilon: f64,
    metric: &BeliefMetric,
) -> bool {
    belief_distance(b, center, metric) <= epsilon
}

pub fn ekf_predict(
    b: &GaussianBelief,
    u: &Control,
    model: &MotionModel,
) -> Result<GaussianBelief, BeliefError> {
    if !b.mean.is_finite() || !u.is_finite() || b.cov.iter().any(|v| !v.is_finite()) {
        return Err(BeliefError::Invalid("non-finite predict input".into()));
    }
    Ok(predict_unchecked(b, u, model))
}

/// Prediction step without input validation, for inner simulation loops.
pub(crate) fn predict_unchecked(b: &GaussianBelief, u: &Control, model: &MotionModel) -> GaussianBelief {
    let (u, _) = model.clamp(u);
    let mean = model.propagate_mean(&b.mean, &u);
    // A = I for the holonomic model.
    let cov = symmetrize(&(b.cov + model.noise_cov(&u)));
    GaussianBelief { mean, cov }
}

/// Diagnostics of a measurement update.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct UpdateDiagnostics {
    pub readings_used: usize,
    /// True when a degenerate innovation variance had to be regularized.
    pub regularized: bool,
}

pub fn ekf_update(
    b: &GaussianBelief,
    z: &Observation,
    model: &ObservationModel,
    landmarks: &LandmarkSet,
) -> Result<(GaussianBelief, UpdateDiagnostics), BeliefError> {
    if !b.mean.is_finite() || b.cov.iter().any(|v| !v.is_finite()) {
        return Err(BeliefError::Invalid("non-finite update input".into()));
    }
    for r in &z.readings {
        if !r.range.is_finite() || !r.bearing.is_finite() {
            return Err(BeliefError::Invalid(format!("non-finite reading for landmark {}", r.id)));
        }
    }
    Ok(update_unchecked(b, z, model, landmarks))
}

pub(crate) fn update_unchecked(
    b: &GaussianBelief,
    z: &Observation,
    model: &ObservationModel,
    landmarks: &LandmarkSet,
) -> (GaussianBelief, UpdateDiagnostics) {
    let mut diag = UpdateDiagnostics::default();
    if z.readings.is_empty() {
        return (*b, diag);
    }
    let m0 = b.mean;
    let m0v = m0.to_vector();
    let mut m = m0v;
    let mut p = b.cov;
    for reading in &z.readings {
        let Some(lm) = landmarks.get(reading.id) else { continue };
        let Some(pred) = model.predict(&m0, lm) else { continue };
        let jac = model.jacobian(&m0, lm);
        let d = pred.0.max(1e-12);
        let var = [model.range_std(d).powi(2), model.bearing_std(d).powi(2)];
        let raw = [reading.range - pred.0, wrap_angle(reading.bearing - pred.1)];
        for row in 0..2 {
            let h: RowVector3<f64> = jac.row(row).into_owned();
            // Innovation relative to the current sequential estimate.
            let mut innov = raw[row] - (h * (m - m0v))[0];
            if row == 1 {
                innov = wrap_angle(innov);
            }
            let ph = p * h.transpose();
            let mut s = (h * ph)[0] + var[row];
            if !(s > INNOVATION_EPS) {
                s += INNOVATION_EPS;
                diag.regularized = true;
            }
            let k = ph / s;
            m += k * innov;
            // Joseph form keeps P symmetric positive semi-definite.
            let ikh = Mat3::identity() - k * h;
            p = ikh * p * ikh.transpose() + k * k.transpose() * var[row];
        }
        diag.readings_used += 1;
    }
    let post = GaussianBelief { mean: State::from_vector(&m), cov: symmetrize(&p) };
    (post, diag)
}

/// Full filter step: predict under `u`, then fold in `z`.
pub fn ekf_step(
    b: &GaussianBelief,
    u: &Control,
    z: &Observation,
    motion: &MotionModel,
    obs: &ObservationModel,
    landmarks: &LandmarkSet,
) -> GaussianBelief {
    let pred = predict_unchecked(b, u, motion);
    update_unchecked(&pred, z, obs, landmarks).0
}
