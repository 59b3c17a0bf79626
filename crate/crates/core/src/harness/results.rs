//! Results documents. Wall-clock timings live under their own key so that
//! reproducibility checks can drop them.

use std::collections::BTreeMap;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::carrl::{AgentMode, Episode};
use crate::closed_loop::{ReachAvoidReport, StateSet};
use crate::error::Result;
use crate::geometry::{Hyperrect, Point2};
use crate::partition::PartitionerKind;
use crate::problems::{MinimalEpsResult, Verdict};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellDoc {
    pub input: Hyperrect,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    pub depth: usize,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct AnalyzeOutput {
    pub problem: String,
    pub output_box: Option<Hyperrect>,
    pub verdict: Option<Verdict>,
    pub minimal_eps: Option<MinimalEpsResult>,
    pub propagator_calls: usize,
    pub under_interval: Option<Hyperrect>,
    pub cells: Vec<CellDoc>,
    /// A prefix of the Monte-Carlo output samples, for plotting.
    pub samples: Vec<Point2>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ReachOutput {
    pub sets: Vec<StateSet>,
    pub errors: Vec<f64>,
    pub final_error: Option<f64>,
    pub reach_calls: usize,
    pub cells: Vec<Hyperrect>,
    pub verdict: Option<ReachAvoidReport>,
    /// A prefix of the sampled trajectories, one list of states per step.
    pub samples: Vec<Vec<Point2>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeDoc {
    pub mode: AgentMode,
    pub seed: u64,
    pub episode: Episode,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct CarrlOutput {
    pub episodes: Vec<EpisodeDoc>,
    pub mean_return: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReachRow {
    pub method: String,
    pub controller_seed: u64,
    pub errors: Vec<f64>,
    pub final_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AreaRow {
    pub net_seed: u64,
    pub partitioner: PartitionerKind,
    pub budget: usize,
    pub area: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct BenchOutput {
    pub reach: Vec<ReachRow>,
    pub analyzer: Vec<AreaRow>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Payload {
    Analyze(AnalyzeOutput),
    Reach(ReachOutput),
    Carrl(CarrlOutput),
    Bench(BenchOutput),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelfCheck {
    pub samples: usize,
    pub violations: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub command: String,
    pub seed: u64,
    pub config: serde_json::Value,
    pub result: Payload,
    pub self_check: Option<SelfCheck>,
    /// Median seconds per phase.
    pub timings: BTreeMap<String, f64>,
}

impl RunResult {
    pub fn to_json(&self) -> Vec<u8> {
        let mut out = serde_json::to_vec_pretty(self).expect("results serialize");
        out.push(b'\n');
        out
    }
}

/// The results document with the `timings` key removed.
pub fn strip_timings(doc: &[u8]) -> Result<Vec<u8>> {
    let mut v: serde_json::Value = serde_json::from_slice(doc)?;
    if let Some(obj) = v.as_object_mut() {
        obj.remove("timings");
    }
    let mut out = serde_json::to_vec_pretty(&v)?;
    out.push(b'\n');
    Ok(out)
}

/// Runs `f` once to warm up, then `reps` more times; returns the first
/// result and the median duration of the timed runs.
pub fn timed<T>(reps: usize, mut f: impl FnMut() -> Result<T>) -> Result<(T, f64)> {
    let out = f()?;
    let mut times = Vec::with_capacity(reps);
    for _ in 0..reps {
        let start = Instant::now();
        f()?;
        times.push(start.elapsed().as_secs_f64());
    }
    Ok((out, median(&mut times)))
}

pub fn median(v: &mut [f64]) -> f64 {
    if v.is_empty() {
        return 0.0;
    }
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}
