//! Rover motion and landmark observation models.

use nalgebra::{DMatrix, DVector, Matrix2x3};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::beliefs::{step_cost, wrap_angle, BeliefMetric, Control, CostWeights, GaussianBelief, Mat3, State, Vec3};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("duplicate landmark id {0}")]
    DuplicateLandmark(usize),
    #[error("invalid model parameter: {0}")]
    InvalidParameter(String),
}

/// Holonomic motion `x' = x + u dt + w`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MotionModel {
    pub dt: f64,
    /// Noise std per unit of commanded speed per step.
    pub sigma_w: f64,
    /// Noise std floor per step.
    pub sigma_w_bias: f64,
    /// Per-axis speed bound.
    pub v_max: f64,
}

impl Default for MotionModel {
    fn default() -> Self {
        Self { dt: 0.005, sigma_w: 0.05, sigma_w_bias: 0.002, v_max: 1.0 }
    }
}

impl MotionModel {
    pub fn validate(&self) -> Result<(), ModelError> {
        if !(self.dt > 0.0) || !(self.v_max > 0.0) || self.sigma_w < 0.0 || self.sigma_w_bias < 0.0 {
            return Err(ModelError::InvalidParameter(format!("{self:?}")));
        }
        Ok(())
    }

    /// Distance covered per step at full speed along one axis.
    pub fn step_length(&self) -> f64 {
        self.v_max * self.dt
    }

    /// Clamps each component to `[-v_max, v_max]`; the flag reports saturation.
    pub fn clamp(&self, u: &Control) -> (Control, bool) {
        let c = |v: f64| v.clamp(-self.v_max, self.v_max);
        let out = Control::new(c(u.vx), c(u.vy), c(u.vtheta));
        (out, out != *u)
    }

    /// Per-axis noise std for a (clamped) control.
    pub fn noise_std(&self, u: &Control) -> Vec3 {
        let s = |v: f64| self.sigma_w * v.abs() * self.dt + self.sigma_w_bias;
        Vec3::new(s(u.vx), s(u.vy), s(u.vtheta))
    }

    pub fn noise_cov(&self, u: &Control) -> Mat3 {
        let s = self.noise_std(u);
        Mat3::from_diagonal(&s.component_mul(&s))
    }

    /// State Jacobian of `f`; the model is linear in the state.
    pub fn jacobian(&self) -> Mat3 {
        Mat3::identity()
    }

    /// Control Jacobian of `f`.
    pub fn control_jacobian(&self) -> Mat3 {
        Mat3::identity() * self.dt
    }

    pub fn propagate_mean(&self, x: &State, u: &Control) -> State {
        x.offset(&(u.to_vector() * self.dt))
    }

    /// `x' = x + u dt + w`; controls beyond `v_max` are clamped and flagged.
    pub fn propagate(&self, x: &State, u: &Control, w: &Vec3) -> (State, bool) {
        let (u, clamped) = self.clamp(u);
        (x.offset(&(u.to_vector() * self.dt + w)), clamped)
    }

    pub fn sample_noise<R: Rng + ?Sized>(&self, u: &Control, rng: &mut R) -> Vec3 {
        let s = self.noise_std(u);
        let n: [f64; 3] = [rng.sample(StandardNormal), rng.sample(StandardNormal), rng.sample(StandardNormal)];
        Vec3::new(s[0] * n[0], s[1] * n[1], s[2] * n[2])
    }
}

/// Range/bearing sensing whose noise grows linearly with distance.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ObservationModel {
    pub xi_r: f64,
    pub xi_theta: f64,
    pub sigma_rb: f64,
    pub sigma_tb: f64,
    pub sensing_range: f64,
}

impl Default for ObservationModel {
    fn default() -> Self {
        Self { xi_r: 0.1, xi_theta: 0.05, sigma_rb: 0.01, sigma_tb: 0.01, sensing_range: 6.0 }
    }
}

/// Everything needed to simulate and price the rover.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct Models {
    pub motion: MotionModel,
    pub observation: ObservationModel,
    pub cost: CostWeights,
    pub metric: BeliefMetric,
}

impl Models {
    pub fn validate(&self) -> Result<(), ModelError> {
        self.motion.validate()?;
        if (self.cost.dt - self.motion.dt).abs() > 1e-15 {
            return Err(ModelError::InvalidParameter(format!(
                "cost dt {} differs from motion dt {}",
                self.cost.dt, self.motion.dt
            )));
        }
        Ok(())
    }

    pub fn step_cost(&self, b: &GaussianBelief) -> f64 {
        step_cost(b, &self.cost)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Landmark {
    pub id: usize,
    pub x: f64,
    pub y: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(try_from = "Vec<Landmark>", into = "Vec<Landmark>")]
pub struct LandmarkSet {
    landmarks: Vec<Landmark>,
}

impl TryFrom<Vec<Landmark>> for LandmarkSet {
    type Error = ModelError;
    fn try_from(v: Vec<Landmark>) -> Result<Self, Self::Error> {
        Self::new(v)
    }
}

impl From<LandmarkSet> for Vec<Landmark> {
    fn from(s: LandmarkSet) -> Self {
        s.landmarks
    }
}

impl LandmarkSet {
    pub fn new(landmarks: Vec<Landmark>) -> Result<Self, ModelError> {
        let mut ids: Vec<usize> = landmarks.iter().map(|l| l.id).collect();
        ids.sort_unstable();
        if let Some(w) = ids.windows(2).find(|w| w[0] == w[1]) {
            return Err(ModelError::DuplicateLandmark(w[0]));
        }
        Ok(Self { landmarks })
    }

    pub fn get(&self, id: usize) -> Option<&Landmark> {
        // ids are usually positional
        match self.landmarks.get(id) {
            Some(l) if l.id == id => Some(l),
            _ => self.landmarks.iter().find(|l| l.id == id),
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = &Landmark> {
        self.landmarks.iter()
    }

    pub fn len(&self) -> usize {
        self.landmarks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.landmarks.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Reading {
    pub id: usize,
    pub range: f64,
    pub bearing: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Observation {
    pub readings: Vec<Reading>,
}

impl ObservationModel {
    pub fn range_std(&self, d: f64) -> f64 {
        self.xi_r * d + self.sigma_rb
    }

    pub fn bearing_std(&self, d: f64) -> f64 {
        self.xi_theta * d + self.sigma_tb
    }

    /// Noise-free `(range, bearing)`; `None` when the robot sits on the landmark.
    pub fn predict(&self, x: &State, lm: &Landmark) -> Option<(f64, f64)> {
        let (dx, dy) = (lm.x - x.x, lm.y - x.y);
        let d = dx.hypot(dy);
        if d == 0.0 {
            return None;
        }
        Some((d, wrap_angle(dy.atan2(dx) - x.theta)))
    }

    pub fn visible(&self, x: &State, lm: &Landmark) -> bool {
        let d = (lm.x - x.x).hypot(lm.y - x.y);
        d > 0.0 && d <= self.sensing_range
    }

    /// Jacobian of `(range, bearing)` with respect to the pose.
    pub fn jacobian(&self, x: &State, lm: &Landmark) -> Matrix2x3<f64> {
        let (dx, dy) = (lm.x - x.x, lm.y - x.y);
        let q = dx * dx + dy * dy;
        let d = q.sqrt();
        Matrix2x3::new(-dx / d, -dy / d, 0.0, dy / q, -dx / q, -1.0)
    }

    pub fn observe<R: Rng + ?Sized>(&self, x: &State, lms: &LandmarkSet, rng: &mut R) -> Observation {
        let mut readings = Vec::new();
        for lm in lms.iter() {
            if !self.visible(x, lm) {
                continue;
            }
            let Some((r, b)) = self.predict(x, lm) else { continue };
            let nr: f64 = rng.sample(StandardNormal);
            let nb: f64 = rng.sample(StandardNormal);
            readings.push(Reading {
                id: lm.id,
                range: r + self.range_std(r) * nr,
                bearing: wrap_angle(b + self.bearing_std(r) * nb),
            });
        }
        Observation { readings }
    }
}

/// Stacked linearization of both models at a pose.
#[derive(Debug, Clone, PartialEq)]
pub struct Linearization {
    pub a: Mat3,
    pub qw: Mat3,
    /// 2n x 3, two rows per visible landmark.
    pub h: DMatrix<f64>,
    /// Diagonal of R, 2n entries.
    pub r_diag: DVector<f64>,
    pub landmark_ids: Vec<usize>,
}

impl Linearization {
    /// `H^T R^-1 H`, the information contributed per step.
    pub fn information(&self) -> Mat3 {
        let mut m = Mat3::zeros();
        for i in 0..self.h.nrows() {
            let row = nalgebra::RowVector3::new(self.h[(i, 0)], self.h[(i, 1)], self.h[(i, 2)]);
            m += row.transpose() * row / self.r_diag[i];
        }
        m
    }
}

pub fn linearize(
    x: &State,
    u: &Control,
    lms: &LandmarkSet,
    motion: &MotionModel,
    obs: &ObservationModel,
) -> Linearization {
    let (u, _) = motion.clamp(u);
    let visible: Vec<&Landmark> = lms.iter().filter(|l| obs.visible(x, l)).collect();
    let n = visible.len();
    let mut h = DMatrix::zeros(2 * n, 3);
    let mut r_diag = DVector::zeros(2 * n);
    for (i, lm) in visible.iter().enumerate() {
        let j = obs.jacobian(x, lm);
        let d = (lm.x - x.x).hypot(lm.y - x.y);
        for c in 0..3 {
            h[(2 * i, c)] = j[(0, c)];
            h[(2 * i + 1, c)] = j[(1, c)];
        }
        r_diag[2 * i] = obs.range_std(d).powi(2);
        r_diag[2 * i + 1] = obs.bearing_std(d).powi(2);
    }
    Linearization {
        a: motion.jacobian(),
        qw: motion.noise_cov(&u),
        h,
        r_diag,
        landmark_ids: visible.iter().map(|l| l.id).collect(),
    }
}

/// Samples one transition of the true system and the reading taken after it.
pub fn generative_step<R: Rng + ?Sized>(
    x: &State,
    u: &Control,
    lms: &LandmarkSet,
    motion: &MotionModel,
    obs: &ObservationModel,
    rng: &mut R,
) -> (State, Observation) {
    let (u, _) = motion.clamp(u);
    let w = motion.sample_noise(&u, rng);
    let (next, _) = motion.propagate(x, &u, &w);
    let z = obs.observe(&next, lms, rng);
    (next, z)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::PI;

    fn noiseless_motion() -> MotionModel {
        MotionModel { sigma_w: 0.0, sigma_w_bias: 0.0, ..MotionModel::default() }
    }

    fn noiseless_obs() -> ObservationModel {
        ObservationModel { xi_r: 0.0, xi_theta: 0.0, sigma_rb: 0.0, sigma_tb: 0.0, ..ObservationModel::default() }
    }

    #[test]
    fn propagate_examples() {
        let m = MotionModel::default();
        let x = State::new(1.0, -2.0, 0.4);
        assert_eq!(m.propagate(&x, &Control::zero(), &Vec3::zeros()).0, x);
        let (y, clamped) = m.propagate(&State::new(0.0, 0.0, 0.0), &Control::new(1.0, 0.0, 0.0), &Vec3::zeros());
        assert!(!clamped);
        assert!((y.x - 0.005).abs() < 1e-15 && y.y == 0.0 && y.theta == 0.0);
        let (_, clamped) = m.propagate(&x, &Control::new(3.0, 0.0, 0.0), &Vec3::zeros());
        assert!(clamped);
    }

    #[test]
    fn propagate_is_additive_without_noise() {
        let m = MotionModel::default();
        let x = State::new(0.5, 0.5, 3.0);
        let (u1, u2) = (Control::new(0.3, -0.2, 0.9), Control::new(-0.7, 0.4, 0.8));
        let (a, _) = m.propagate(&x, &u1, &Vec3::zeros());
        let (b, _) = m.propagate(&a, &u2, &Vec3::zeros());
        let sum = Control::from_vector(&(u1.to_vector() + u2.to_vector()));
        let c = State::from_vector(&(x.to_vector() + sum.to_vector() * m.dt));
        assert!(b.error_to(&c).abs().max() < 1e-12);
    }

    #[test]
    fn propagate_wraps_heading() {
        let m = MotionModel::default();
        for theta in [-10.0, -PI, 0.0, PI, 7.5, 100.0] {
            let (y, _) = m.propagate(&State { x: 0.0, y: 0.0, theta }, &Control::new(0.0, 0.0, 1.0), &Vec3::new(0.0, 0.0, 0.3));
            assert!(y.theta > -PI && y.theta <= PI);
        }
    }

    #[test]
    fn observe_geometry() {
        let obs = noiseless_obs();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let lms = LandmarkSet::new(vec![Landmark { id: 0, x: 1.0, y: 0.0 }]).unwrap();
        let z = obs.observe(&State::new(0.0, 0.0, 0.0), &lms, &mut rng);
        assert_eq!(z.readings.len(), 1);
        assert!((z.readings[0].range - 1.0).abs() < 1e-15 && z.readings[0].bearing.abs() < 1e-15);
        let lms = LandmarkSet::new(vec![Landmark { id: 3, x: 0.0, y: 1.0 }]).unwrap();
        let z = obs.observe(&State::new(0.0, 0.0, PI / 2.0), &lms, &mut rng);
        assert!(z.readings[0].bearing.abs() < 1e-15);
        assert_eq!(z.readings[0].id, 3);
        // sitting on the landmark and out-of-range landmarks give no reading
        let lms = LandmarkSet::new(vec![Landmark { id: 0, x: 0.0, y: 0.0 }, Landmark { id: 1, x: 100.0, y: 0.0 }]).unwrap();
        assert!(obs.observe(&State::new(0.0, 0.0, 0.0), &lms, &mut rng).readings.is_empty());
    }

    #[test]
    fn range_noise_formula() {
        let obs = ObservationModel { xi_r: 0.1, sigma_rb: 0.01, ..ObservationModel::default() };
        assert!((obs.range_std(5.0) - 0.51).abs() < 1e-15);
    }

    #[test]
    fn duplicate_landmarks_rejected() {
        let l = Landmark { id: 2, x: 0.0, y: 0.0 };
        assert_eq!(LandmarkSet::new(vec![l, l]), Err(ModelError::DuplicateLandmark(2)));
    }

    #[test]
    fn jacobians_match_finite_differences() {
        let obs = ObservationModel { sensing_range: 100.0, ..ObservationModel::default() };
        let motion = MotionModel::default();
        let lms = LandmarkSet::new(vec![
            Landmark { id: 0, x: 3.0, y: 1.0 },
            Landmark { id: 1, x: -2.0, y: 4.0 },
            Landmark { id: 2, x: 0.5, y: -5.0 },
        ])
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let h_step = 1e-6;
        let mut worst: f64 = 0.0;
        for _ in 0..100 {
            let x = State::new(rng.random_range(-4.0..4.0), rng.random_range(-4.0..4.0), rng.random_range(-3.0..3.0));
            let u = Control::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
            let lin = linearize(&x, &u, &lms, &motion, &obs);
            for c in 0..3 {
                let mut e = Vec3::zeros();
                e[c] = h_step;
                let xp = State::from_vector(&(x.to_vector() + e));
                let xm = State::from_vector(&(x.to_vector() - e));
                let fp = motion.propagate_mean(&xp, &u).to_vector();
                let fm = motion.propagate_mean(&xm, &u).to_vector();
                for r in 0..3 {
                    worst = worst.max((((fp[r] - fm[r]) / (2.0 * h_step)) - lin.a[(r, c)]).abs());
                }
                for (i, id) in lin.landmark_ids.iter().enumerate() {
                    let lm = lms.get(*id).unwrap();
                    let (rp, bp) = obs.predict(&xp, lm).unwrap();
                    let (rm, bm) = obs.predict(&xm, lm).unwrap();
                    let dr = (rp - rm) / (2.0 * h_step);
                    let db = wrap_angle(bp - bm) / (2.0 * h_step);
                    worst = worst.max((dr - lin.h[(2 * i, c)]).abs());
                    worst = worst.max((db - lin.h[(2 * i + 1, c)]).abs());
                }
            }
        }
        assert!(worst < 1e-5, "max finite-difference error {worst:e}");
    }

    #[test]
    fn range_gradient_due_east() {
        let obs = ObservationModel::default();
        let j = obs.jacobian(&State::new(0.0, 0.0, 0.2), &Landmark { id: 0, x: 4.0, y: 0.0 });
        assert_eq!(j[(0, 0)], -1.0);
        assert_eq!(j[(0, 1)], 0.0);
    }

    #[test]
    fn generative_step_zero_noise_and_determinism() {
        let lms = LandmarkSet::new(vec![Landmark { id: 0, x: 2.0, y: 2.0 }]).unwrap();
        let x = State::new(0.0, 0.0, 0.1);
        let u = Control::new(0.5, -0.5, 0.2);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (y, z) = generative_step(&x, &u, &lms, &noiseless_motion(), &noiseless_obs(), &mut rng);
        let expect = noiseless_motion().propagate_mean(&x, &u);
        assert_eq!(y, expect);
        let (r, b) = noiseless_obs().predict(&expect, lms.get(0).unwrap()).unwrap();
        assert_eq!(z.readings, vec![Reading { id: 0, range: r, bearing: b }]);

        let motion = MotionModel::default();
        let obs = ObservationModel::default();
        let a = generative_step(&x, &u, &lms, &motion, &obs, &mut ChaCha8Rng::seed_from_u64(11));
        let b = generative_step(&x, &u, &lms, &motion, &obs, &mut ChaCha8Rng::seed_from_u64(11));
        assert_eq!(a, b);
    }

    #[test]
    fn generative_mean_matches_noiseless_propagation() {
        let motion = MotionModel::default();
        let obs = ObservationModel::default();
        let lms = LandmarkSet::default();
        let x = State::new(1.0, 1.0, 0.0);
        let u = Control::new(1.0, 0.5, 0.0);
        let n = 100_000;
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut sum = Vec3::zeros();
        for _ in 0..n {
            let (y, _) = generative_step(&x, &u, &lms, &motion, &obs, &mut rng);
            sum += y.error_to(&x);
        }
        let mean = sum / n as f64;
        let expected = u.to_vector() * motion.dt;
        let sd = motion.noise_std(&u);
        for i in 0..3 {
            assert!((mean[i] - expected[i]).abs() < 3.0 * sd[i] / (n as f64).sqrt(), "axis {i}");
        }
    }

    #[test]
    fn observation_noise_is_affine_in_distance() {
        let obs = ObservationModel { sensing_range: 100.0, ..ObservationModel::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let distances = [1.0, 2.0, 3.0, 4.0, 5.0];
        let per = 20_000; // 10^5 samples in total
        let mut stds_r = Vec::new();
        let mut stds_b = Vec::new();
        for &d in &distances {
            let lms = LandmarkSet::new(vec![Landmark { id: 0, x: d, y: 0.0 }]).unwrap();
            let x = State::new(0.0, 0.0, 0.0);
            let (mut sr, mut sb) = (0.0, 0.0);
            for _ in 0..per {
                let z = obs.observe(&x, &lms, &mut rng);
                sr += (z.readings[0].range - d).powi(2);
                sb += z.readings[0].bearing.powi(2);
            }
            stds_r.push((sr / per as f64).sqrt());
            stds_b.push((sb / per as f64).sqrt());
        }
        let slope = |ys: &[f64]| {
            let n = distances.len() as f64;
            let mx = distances.iter().sum::<f64>() / n;
            let my = ys.iter().sum::<f64>() / n;
            let num: f64 = distances.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
            let den: f64 = distances.iter().map(|x| (x - mx).powi(2)).sum();
            num / den
        };
        assert!((slope(&stds_r) / obs.xi_r - 1.0).abs() < 0.05);
        assert!((slope(&stds_b) / obs.xi_theta - 1.0).abs() < 0.05);
    }
}
