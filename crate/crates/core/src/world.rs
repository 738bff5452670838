//! Rectangular worlds: obstacles, landmarks, collision checks and the
//! three rover-navigation benchmark generators.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::beliefs::State;
use crate::models::{Landmark, LandmarkSet, ModelError};

const MAX_REJECTIONS: usize = 10_000;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum WorldError {
    #[error("invalid rectangle {0:?}")]
    InvalidRect(Rect),
    #[error("{0} is in collision")]
    BlockedEndpoint(&'static str),
    #[error("landmark {0} lies outside the bounds")]
    LandmarkOutOfBounds(usize),
    #[error("infeasible benchmark spec: {0}")]
    InfeasibleSpec(String),
    #[error("no free state found after {0} rejections")]
    InfeasibleEnvironment(usize),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Axis-aligned rectangle.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Rect {
    pub xmin: f64,
    pub ymin: f64,
    pub xmax: f64,
    pub ymax: f64,
}

pub type Obstacle = Rect;

impl Rect {
    pub fn new(xmin: f64, ymin: f64, xmax: f64, ymax: f64) -> Result<Self, WorldError> {
        let r = Self { xmin, ymin, xmax, ymax };
        if !(xmin < xmax && ymin < ymax) {
            return Err(WorldError::InvalidRect(r));
        }
        Ok(r)
    }

    pub fn centered(cx: f64, cy: f64, w: f64, h: f64) -> Result<Self, WorldError> {
        Self::new(cx - w / 2.0, cy - h / 2.0, cx + w / 2.0, cy + h / 2.0)
    }

    pub fn inflate(&self, r: f64) -> Rect {
        Rect { xmin: self.xmin - r, ymin: self.ymin - r, xmax: self.xmax + r, ymax: self.ymax + r }
    }

    pub fn area(&self) -> f64 {
        (self.xmax - self.xmin).max(0.0) * (self.ymax - self.ymin).max(0.0)
    }

    pub fn intersection(&self, o: &Rect) -> Rect {
        Rect {
            xmin: self.xmin.max(o.xmin),
            ymin: self.ymin.max(o.ymin),
            xmax: self.xmax.min(o.xmax),
            ymax: self.ymax.min(o.ymax),
        }
    }

    /// Closed containment.
    pub fn contains(&self, x: f64, y: f64) -> bool {
        x >= self.xmin && x <= self.xmax && y >= self.ymin && y <= self.ymax
    }

    /// Whether the closed segment `a-b` touches the closed rectangle (slab clipping).
    pub fn intersects_segment(&self, a: (f64, f64), b: (f64, f64)) -> bool {
        let (mut t0, mut t1) = (0.0f64, 1.0f64);
        let d = (b.0 - a.0, b.1 - a.1);
        for (p, dp, lo, hi) in [(a.0, d.0, self.xmin, self.xmax), (a.1, d.1, self.ymin, self.ymax)] {
            if dp == 0.0 {
                if p < lo || p > hi {
                    return false;
                }
                continue;
            }
            let (mut ta, mut tb) = ((lo - p) / dp, (hi - p) / dp);
            if ta > tb {
                std::mem::swap(&mut ta, &mut tb);
            }
            t0 = t0.max(ta);
            t1 = t1.min(tb);
            if t0 > t1 {
                return false;
            }
        }
        true
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Environment {
    pub bounds: Rect,
    pub obstacles: Vec<Obstacle>,
    pub landmarks: LandmarkSet,
    pub start: State,
    pub goal: State,
    pub robot_radius: f64,
}

impl Environment {
    pub fn new(
        bounds: Rect,
        obstacles: Vec<Obstacle>,
        landmarks: LandmarkSet,
        start: State,
        goal: State,
        robot_radius: f64,
    ) -> Result<Self, WorldError> {
        let env = Self { bounds, obstacles, landmarks, start, goal, robot_radius };
        env.validate()?;
        Ok(env)
    }

    pub fn validate(&self) -> Result<(), WorldError> {
        Rect::new(self.bounds.xmin, self.bounds.ymin, self.bounds.xmax, self.bounds.ymax)?;
        for o in &self.obstacles {
            Rect::new(o.xmin, o.ymin, o.xmax, o.ymax)?;
        }
        if let Some(l) = self.landmarks.iter().find(|l| !self.bounds.contains(l.x, l.y)) {
            return Err(WorldError::LandmarkOutOfBounds(l.id));
        }
        if self.collides(&self.start, None) {
            return Err(WorldError::BlockedEndpoint("start"));
        }
        if self.collides(&self.goal, None) {
            return Err(WorldError::BlockedEndpoint("goal"));
        }
        Ok(())
    }

    /// Region the robot center may occupy.
    pub fn free_bounds(&self) -> Rect {
        self.bounds.inflate(-self.robot_radius)
    }

    /// The same world for a robot `margin` wider in every direction.
    pub fn with_clearance(&self, margin: f64) -> Self {
        Self { robot_radius: self.robot_radius + margin, ..self.clone() }
    }

    pub fn collides_point(&self, x: f64, y: f64) -> bool {
        self.point_blocked(x, y, self.robot_radius)
    }

    fn point_blocked(&self, x: f64, y: f64, r: f64) -> bool {
        !self.bounds.inflate(-r).contains(x, y) || self.obstacles.iter().any(|o| o.inflate(r).contains(x, y))
    }

    /// Point test when `b` is `None`, swept-segment test otherwise.
    pub fn collides(&self, a: &State, b: Option<&State>) -> bool {
        match b {
            None => self.collides_point(a.x, a.y),
            Some(b) => self.collides_segment((a.x, a.y), (b.x, b.y)),
        }
    }

    pub fn collides_segment(&self, a: (f64, f64), b: (f64, f64)) -> bool {
        self.segment_blocked(a, b, self.robot_radius)
    }

    fn segment_blocked(&self, a: (f64, f64), b: (f64, f64), r: f64) -> bool {
        // canonical endpoint order makes the test exactly symmetric
        let (a, b) = if (a.0, a.1) <= (b.0, b.1) { (a, b) } else { (b, a) };
        let fb = self.bounds.inflate(-r);
        if !fb.contains(a.0, a.1) || !fb.contains(b.0, b.1) {
            return true;
        }
        self.obstacles.iter().any(|o| o.inflate(r).intersects_segment(a, b))
    }

    /// Swept test against obstacles grown by `margin` beyond the robot
    /// radius. A start already inside the margin is held to the robot radius
    /// only, so that moving away from an obstacle stays possible.
    pub fn collides_with_margin(&self, a: &State, b: &State, margin: f64) -> bool {
        let r = self.robot_radius + margin;
        if margin <= 0.0 || self.point_blocked(a.x, a.y, r) {
            return self.collides(a, Some(b));
        }
        self.segment_blocked((a.x, a.y), (b.x, b.y), r)
    }

    /// Rejection sampling over the free bounds; heading uniform.
    pub fn sample_free_state<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<State, WorldError> {
        self.sample_free_state_counted(rng).map(|(s, _)| s)
    }

    /// As [`Self::sample_free_state`], also returning the number of draws used.
    pub fn sample_free_state_counted<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<(State, usize), WorldError> {
        let fb = self.free_bounds();
        if fb.xmin >= fb.xmax || fb.ymin >= fb.ymax {
            return Err(WorldError::InfeasibleEnvironment(0));
        }
        for i in 1..=MAX_REJECTIONS {
            let x = rng.random_range(fb.xmin..fb.xmax);
            let y = rng.random_range(fb.ymin..fb.ymax);
            let theta = rng.random_range(-PI..PI);
            if !self.collides_point(x, y) {
                return Ok((State::new(x, y, theta), i));
            }
        }
        Err(WorldError::InfeasibleEnvironment(MAX_REJECTIONS))
    }

    /// SHA-256 of the canonical JSON encoding.
    pub fn hash(&self) -> String {
        let doc = serde_json::to_vec(self).expect("environment serializes");
        hex::encode(Sha256::digest(&doc))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum RnpFamily {
    InfoTrap,
    ObsWall,
    Forest,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RnpSpec {
    pub family: RnpFamily,
    pub e: f64,
    pub o: f64,
    #[serde(default)]
    pub seed: u64,
}

/// Layout constants for the generators.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RnpGeometry {
    pub robot_radius: f64,
    /// Distance of start and goal from the left/right edges.
    pub endpoint_margin: f64,
    pub infotrap_passage_width: f64,
    /// Height of the passage center as a fraction of the side.
    pub infotrap_passage_height: f64,
    pub infotrap_landmarks: usize,
    pub infotrap_landmark_inset: f64,
    pub wall_thickness: f64,
    /// ObsWall landmarks form a square grid with this spacing.
    pub obswall_landmark_spacing: f64,
    pub forest_obstacle_side: f64,
    pub forest_jitter: f64,
    /// Gap between the map edge and the obstacle grid.
    pub forest_margin: f64,
    /// Landmarks are drawn one per cell of a square grid of this many cells per side.
    pub forest_landmark_cells: usize,
}

impl Default for RnpGeometry {
    fn default() -> Self {
        Self {
            robot_radius: 0.2,
            endpoint_margin: 1.0,
            infotrap_passage_width: 1.0,
            infotrap_passage_height: 0.5,
            infotrap_landmarks: 4,
            infotrap_landmark_inset: 0.5,
            wall_thickness: 0.5,
            obswall_landmark_spacing: 4.0,
            forest_obstacle_side: 0.8,
            forest_jitter: 0.4,
            forest_margin: 1.5,
            forest_landmark_cells: 5,
        }
    }
}

pub fn generate_rnp(spec: &RnpSpec) -> Result<Environment, WorldError> {
    generate_rnp_with(spec, &RnpGeometry::default())
}

pub fn generate_rnp_with(spec: &RnpSpec, g: &RnpGeometry) -> Result<Environment, WorldError> {
    let e = spec.e;
    if !(e > 0.0) || !(spec.o >= 0.0) {
        return Err(WorldError::InfeasibleSpec(format!("e = {e}, o = {}", spec.o)));
    }
    let bounds = Rect::new(0.0, 0.0, e, e)?;
    match spec.family {
        RnpFamily::InfoTrap => infotrap(spec, g, bounds),
        RnpFamily::ObsWall => obswall(spec, g, bounds),
        RnpFamily::Forest => forest(spec, g, bounds),
    }
}

fn infotrap(spec: &RnpSpec, g: &RnpGeometry, bounds: Rect) -> Result<Environment, WorldError> {
    let (e, o, w) = (spec.e, spec.o, g.infotrap_passage_width);
    let yp = e * g.infotrap_passage_height;
    let clear = 2.0 * g.endpoint_margin;
    if o + clear >= e || w <= 2.0 * g.robot_radius || yp - w / 2.0 <= 0.0 || yp + w / 2.0 >= e {
        return Err(WorldError::InfeasibleSpec(format!("InfoTrap passage does not fit (e = {e}, o = {o})")));
    }
    let mut obstacles = Vec::new();
    if o > 0.0 {
        let (x0, x1) = (e / 2.0 - o / 2.0, e / 2.0 + o / 2.0);
        obstacles.push(Rect::new(x0, 0.0, x1, yp - w / 2.0)?);
        obstacles.push(Rect::new(x0, yp + w / 2.0, x1, e)?);
    }
    let n = g.infotrap_landmarks;
    let landmarks = (0..n)
        .map(|i| Landmark { id: i, x: e * (i as f64 + 0.5) / n as f64, y: e - g.infotrap_landmark_inset })
        .collect();
    Environment::new(
        bounds,
        obstacles,
        LandmarkSet::new(landmarks)?,
        State::new(g.endpoint_margin, yp, 0.0),
        State::new(e - g.endpoint_margin, yp, 0.0),
        g.robot_radius,
    )
}

fn obswall(spec: &RnpSpec, g: &RnpGeometry, bounds: Rect) -> Result<Environment, WorldError> {
    let (e, o) = (spec.e, spec.o);
    let gap = (e - o) / 2.0;
    if gap <= 2.0 * g.robot_radius + 0.5 || 2.0 * g.endpoint_margin >= e - g.wall_thickness {
        return Err(WorldError::InfeasibleSpec(format!("ObsWall wall leaves no corridor (e = {e}, o = {o})")));
    }
    let mut obstacles = Vec::new();
    if o > 0.0 {
        obstacles.push(Rect::centered(e / 2.0, e / 2.0, g.wall_thickness, o)?);
    }
    let s = g.obswall_landmark_spacing;
    let n = (e / s).floor().max(1.0) as usize;
    let offset = (e - (n as f64 - 1.0) * s) / 2.0;
    let mut landmarks = Vec::new();
    for j in 0..n {
        for i in 0..n {
            let id = landmarks.len();
            landmarks.push(Landmark { id, x: offset + i as f64 * s, y: offset + j as f64 * s });
        }
    }
    Environment::new(
        bounds,
        obstacles,
        LandmarkSet::new(landmarks)?,
        State::new(g.endpoint_margin, e / 2.0, 0.0),
        State::new(e - g.endpoint_margin, e / 2.0, 0.0),
        g.robot_radius,
    )
}

fn forest(spec: &RnpSpec, g: &RnpGeometry, bounds: Rect) -> Result<Environment, WorldError> {
    let e = spec.e;
    let count = spec.o.round() as usize;
    let side = g.forest_obstacle_side;
    let inner = e - 2.0 * g.forest_margin;
    let cells = (count as f64).sqrt().ceil() as usize;
    let spacing = if cells > 0 { inner / cells as f64 } else { inner };
    if inner <= 0.0 || (cells > 0 && spacing <= side) {
        return Err(WorldError::InfeasibleSpec(format!("{count} obstacles do not fit in a {e} m forest")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut obstacles = Vec::with_capacity(count);
    // row-major over the grid, first `count` cells
    for k in 0..count {
        let (i, j) = (k % cells, k / cells);
        let jit = g.forest_jitter.min((spacing - side) / 2.0);
        let cx = g.forest_margin + (i as f64 + 0.5) * spacing + rng.random_range(-1.0..=1.0) * jit;
        let cy = g.forest_margin + (j as f64 + 0.5) * spacing + rng.random_range(-1.0..=1.0) * jit;
        obstacles.push(Rect::centered(cx, cy, side, side)?);
    }
    let m = g.forest_landmark_cells.max(1);
    let cell = e / m as f64;
    let mut landmarks = Vec::with_capacity(m * m);
    for j in 0..m {
        for i in 0..m {
            let x = (i as f64 + rng.random_range(0.1..0.9)) * cell;
            let y = (j as f64 + rng.random_range(0.1..0.9)) * cell;
            landmarks.push(Landmark { id: landmarks.len(), x, y });
        }
    }
    let start = State::new(g.endpoint_margin, g.endpoint_margin, 0.0);
    let goal = State::new(e - g.endpoint_margin, e - g.endpoint_margin, 0.0);
    Environment::new(bounds, obstacles, LandmarkSet::new(landmarks)?, start, goal, g.robot_radius)
        .map_err(|err| match err {
            WorldError::BlockedEndpoint(w) => WorldError::InfeasibleSpec(format!("forest blocks the {w}")),
            other => other,
        })
}
