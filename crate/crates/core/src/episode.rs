//! Episode logs shared by all planners.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::beliefs::{Control, GaussianBelief, State};
use crate::models::Observation;

/// Global per-episode step cap.
pub const GLOBAL_STEP_CAP: usize = 20_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Outcome {
    Goal,
    Collision,
    Cap,
    /// The planner had no feasible way to the goal from the start.
    Infeasible,
    /// The episode panicked.
    Error,
}

impl Outcome {
    pub fn as_str(&self) -> &'static str {
        match self {
            Outcome::Goal => "goal",
            Outcome::Collision => "collision",
            Outcome::Cap => "cap",
            Outcome::Infeasible => "infeasible",
            Outcome::Error => "error",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeHeader {
    pub planner: String,
    pub env_hash: String,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub k: usize,
    pub state: State,
    pub control: Control,
    pub obs_digest: String,
    pub mean: State,
    pub cov_trace: f64,
    pub step_cost: f64,
    pub cumulative_cost: f64,
    /// The planner had to fall back to a stabilizer this step.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub fallback: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeSummary {
    pub outcome: Outcome,
    pub steps: usize,
    pub total_cost: f64,
    /// Sum of covariance traces of the beliefs controls were applied from.
    pub sum_trace: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeLog {
    pub header: EpisodeHeader,
    pub steps: Vec<StepRecord>,
    pub summary: EpisodeSummary,
}

/// Mixes a label into a seed (FNV-1a over the label, then splitmix64).
pub fn derive_seed(seed: u64, label: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in label.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    let mut z = seed ^ h;
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Independent random streams of one episode. The world stream drives the
/// true system and is identical across planners for the same seed.
#[derive(Debug, Clone)]
pub struct EpisodeRngs {
    pub world: ChaCha8Rng,
    pub planner: ChaCha8Rng,
}

impl EpisodeRngs {
    pub fn new(seed: u64) -> Self {
        Self {
            world: ChaCha8Rng::seed_from_u64(derive_seed(seed, "world")),
            planner: ChaCha8Rng::seed_from_u64(derive_seed(seed, "planner")),
        }
    }
}

pub fn observation_digest(z: &Observation) -> String {
    let mut h = Sha256::new();
    for r in &z.readings {
        h.update((r.id as u64).to_le_bytes());
        h.update(r.range.to_le_bytes());
        h.update(r.bearing.to_le_bytes());
    }
    hex::encode(&h.finalize()[..8])
}

/// Accumulates step records while an episode runs.
#[derive(Debug, Clone)]
pub struct EpisodeRecorder {
    header: EpisodeHeader,
    steps: Vec<StepRecord>,
    total_cost: f64,
    sum_trace: f64,
    pub keep_steps: bool,
    n: usize,
}

impl EpisodeRecorder {
    pub fn new(planner: &str, env_hash: &str, seed: u64) -> Self {
        Self {
            header: EpisodeHeader { planner: planner.to_string(), env_hash: env_hash.to_string(), seed },
            steps: Vec::new(),
            total_cost: 0.0,
            sum_trace: 0.0,
            keep_steps: true,
            n: 0,
        }
    }

    pub fn steps(&self) -> usize {
        self.n
    }

    /// Records one executed step; `from` is the belief the control was computed from.
    pub fn record(&mut self, from: &GaussianBelief, state: &State, u: &Control, z: &Observation, after: &GaussianBelief, cost: f64, fallback: bool) {
        self.total_cost += cost;
        self.sum_trace += from.trace();
        self.n += 1;
        if self.keep_steps {
            self.steps.push(StepRecord {
                k: self.n - 1,
                state: *state,
                control: *u,
                obs_digest: observation_digest(z),
                mean: after.mean,
                cov_trace: after.trace(),
                step_cost: cost,
                cumulative_cost: self.total_cost,
                fallback,
            });
        }
    }

    pub fn finish(self, outcome: Outcome) -> EpisodeLog {
        EpisodeLog {
            header: self.header,
            summary: EpisodeSummary { outcome, steps: self.n, total_cost: self.total_cost, sum_trace: self.sum_trace },
            steps: self.steps,
        }
    }
}

impl EpisodeLog {
    /// JSON-lines: header, one line per step, then the summary.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        out.push_str(&serde_json::to_string(&serde_json::json!({ "header": self.header })).expect("serializable"));
        out.push('\n');
        for s in &self.steps {
            out.push_str(&serde_json::to_string(s).expect("serializable"));
            out.push('\n');
        }
        out.push_str(&serde_json::to_string(&serde_json::json!({ "summary": self.summary })).expect("serializable"));
        out.push('\n');
        out
    }

    pub fn from_jsonl(text: &str) -> Result<Self, serde_json::Error> {
        #[derive(Deserialize)]
        struct H {
            header: EpisodeHeader,
        }
        #[derive(Deserialize)]
        struct S {
            summary: EpisodeSummary,
        }
        let lines: Vec<&str> = text.lines().filter(|l| !l.trim().is_empty()).collect();
        if lines.len() < 2 {
            return Err(serde::de::Error::custom("episode log needs a header and a summary line"));
        }
        let header = serde_json::from_str::<H>(lines.first().copied().unwrap_or(""))?.header;
        let summary = serde_json::from_str::<S>(lines.last().copied().unwrap_or(""))?.summary;
        let steps = lines[1..lines.len() - 1].iter().map(|l| serde_json::from_str(l)).collect::<Result<_, _>>()?;
        Ok(Self { header, steps, summary })
    }

    pub fn is_success(&self) -> bool {
        self.summary.outcome == Outcome::Goal
    }

    /// Positions of the belief mean, starting after the first step.
    pub fn mean_path(&self) -> impl Iterator<Item = &State> {
        self.steps.iter().map(|s| &s.mean)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::beliefs::Mat3;
    use crate::models::Reading;

    #[test]
    fn jsonl_round_trip() {
        let mut r = EpisodeRecorder::new("bvl", "abc", 3);
        let b = GaussianBelief { mean: State::new(1.0, 2.0, 0.1), cov: Mat3::identity() * 0.01 };
        let z = Observation { readings: vec![Reading { id: 1, range: 2.0, bearing: 0.3 }] };
        r.record(&b, &State::new(1.0, 2.0, 0.0), &Control::new(0.1, 0.2, 0.0), &z, &b, 0.305, false);
        r.record(&b, &State::new(1.1, 2.0, 0.0), &Control::zero(), &Observation::default(), &b, 0.305, true);
        let log = r.finish(Outcome::Goal);
        let back = EpisodeLog::from_jsonl(&log.to_jsonl()).unwrap();
        assert_eq!(back, log);
        assert_eq!(log.summary.steps, 2);
        assert!((log.summary.sum_trace - 0.06).abs() < 1e-12);
    }

    #[test]
    fn derived_streams_are_distinct_and_stable() {
        use rand::Rng;
        assert_ne!(derive_seed(1, "world"), derive_seed(1, "planner"));
        assert_ne!(derive_seed(1, "world"), derive_seed(2, "world"));
        assert_eq!(derive_seed(7, "world"), derive_seed(7, "world"));
        let mut a = EpisodeRngs::new(5);
        let mut b = EpisodeRngs::new(5);
        assert_eq!(a.world.random::<u64>(), b.world.random::<u64>());
    }

    #[test]
    fn digest_depends_on_readings() {
        let a = Observation { readings: vec![Reading { id: 1, range: 2.0, bearing: 0.3 }] };
        let b = Observation { readings: vec![Reading { id: 1, range: 2.0, bearing: 0.31 }] };
        assert_ne!(observation_digest(&a), observation_digest(&b));
        assert_eq!(observation_digest(&a).len(), 16);
    }
}
