//! Scenario documents read by the command-line harness. Unknown keys are
//! rejected everywhere.

use std::path::{Path, PathBuf};

use ndarray::{Array1, Array2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::carrl::{crafted_qnet, AdversaryConfig, AgentMode, RobustConfig};
use crate::closed_loop::{benchmark_controller, ClosedLoopPartitioner, LtvSystem, ReachAvoidSpec, StateSet, StepDynamics};
use crate::error::{Error, Result};
use crate::geometry::{Hyperrect, Norm};
use crate::network::{load_network, matrix_from_rows, Network};
use crate::partition::{AnalyzerConfig, PartitionerKind};

/// Where a network comes from. Relative file paths are resolved against the
/// config file's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum NetSource {
    File(PathBuf),
    Random { dims: Vec<usize>, seed: u64 },
    BenchmarkController { seed: u64 },
    CraftedQnet { k: [f64; 2] },
}

impl NetSource {
    pub fn load(&self, base: &Path) -> Result<Network> {
        match self {
            NetSource::File(p) => {
                let path = if p.is_absolute() { p.clone() } else { base.join(p) };
                let bytes = std::fs::read(&path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
                load_network(&bytes)
            }
            NetSource::Random { dims, seed } => {
                if dims.len() < 2 || dims.contains(&0) {
                    return Err(Error::Config("random network needs at least two positive widths".into()));
                }
                Ok(Network::random(dims, &mut ChaCha8Rng::seed_from_u64(*seed)))
            }
            NetSource::BenchmarkController { seed } => Ok(benchmark_controller(*seed)),
            NetSource::CraftedQnet { k } => Ok(crafted_qnet(*k)),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Problem {
    OutputBall {
        input: Hyperrect,
    },
    /// `label` defaults to the nominal class at the center of `input`.
    Verify {
        input: Hyperrect,
        label: Option<usize>,
    },
    MinimalEps {
        x_nom: Vec<f64>,
        p: Norm,
        tol: Option<f64>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnalyzeConfig {
    pub network: NetSource,
    pub problem: Problem,
    pub analyzer: AnalyzerConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StepDoc {
    pub a: Vec<Vec<f64>>,
    pub b: Vec<Vec<f64>>,
    /// `n_x × n_y`; observations are `cᵀ x + ν`.
    pub c: Vec<Vec<f64>>,
    #[serde(default)]
    pub offset: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LimitsDoc {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SystemDoc {
    /// One entry for time-invariant dynamics, otherwise one per step.
    pub dynamics: Vec<StepDoc>,
    #[serde(default)]
    pub process_noise: Option<Hyperrect>,
    #[serde(default)]
    pub measurement_noise: Option<Hyperrect>,
    #[serde(default)]
    pub control_limits: Option<LimitsDoc>,
}

impl SystemDoc {
    pub fn build(&self) -> Result<LtvSystem> {
        let steps = self
            .dynamics
            .iter()
            .map(|d| {
                let a = mat(&d.a)?;
                let offset = match &d.offset {
                    Some(o) => Array1::from(o.clone()),
                    None => Array1::zeros(a.nrows()),
                };
                StepDynamics::new(a, mat(&d.b)?, mat(&d.c)?, offset)
            })
            .collect::<Result<Vec<_>>>()?;
        let limits = self
            .control_limits
            .as_ref()
            .map(|l| (Array1::from(l.lower.clone()), Array1::from(l.upper.clone())));
        LtvSystem::new(steps, self.process_noise.clone(), self.measurement_noise.clone(), limits)
    }
}

fn mat(rows: &[Vec<f64>]) -> Result<Array2<f64>> {
    matrix_from_rows(rows).map_err(Error::Config)
}

fn default_partitioner() -> ClosedLoopPartitioner {
    ClosedLoopPartitioner::None
}

fn default_samples() -> usize {
    1000
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReachConfig {
    pub system: SystemDoc,
    pub policy: NetSource,
    pub x0: StateSet,
    pub horizon: usize,
    /// Facet matrix; the identity (box outputs) when absent.
    #[serde(default)]
    pub a_out: Option<Vec<Vec<f64>>>,
    #[serde(default = "default_partitioner")]
    pub partitioner: ClosedLoopPartitioner,
    #[serde(default)]
    pub reach_avoid: Option<ReachAvoidSpec>,
    /// Rollouts used for the error metric and the plot.
    #[serde(default = "default_samples")]
    pub samples: usize,
    pub seed: u64,
}

impl ReachConfig {
    pub fn a_out(&self) -> Result<Option<Array2<f64>>> {
        self.a_out.as_deref().map(mat).transpose()
    }
}

fn default_modes() -> Vec<AgentMode> {
    vec![AgentMode::Nominal, AgentMode::Carrl]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CarrlConfig {
    pub qnet: NetSource,
    pub adversary: AdversaryConfig,
    /// Defaults to the adversary's radius and norm.
    #[serde(default)]
    pub robust: Option<RobustConfig>,
    #[serde(default = "default_modes")]
    pub modes: Vec<AgentMode>,
    pub horizon: usize,
    pub episodes: usize,
    pub seed: u64,
}

impl Default for CarrlConfig {
    fn default() -> Self {
        Self {
            qnet: NetSource::CraftedQnet { k: [1.0, 1.5] },
            adversary: AdversaryConfig::uniform(2, 0.1, Norm::Inf),
            robust: None,
            modes: default_modes(),
            horizon: 30,
            episodes: 5,
            seed: 0,
        }
    }
}

impl CarrlConfig {
    pub fn robust(&self) -> RobustConfig {
        self.robust.clone().unwrap_or_else(|| RobustConfig {
            eps: self.adversary.eps.clone(),
            p: self.adversary.p,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReachBench {
    pub controller_seeds: Vec<u64>,
    pub horizon: usize,
    pub noise: Option<f64>,
    pub partition_counts: Vec<usize>,
    pub samples: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnalyzerBench {
    pub net_seeds: Vec<u64>,
    pub dims: Vec<usize>,
    pub input: Hyperrect,
    pub budgets: Vec<usize>,
    pub partitioners: Vec<PartitionerKind>,
    pub analyzer: AnalyzerConfig,
}

fn default_repetitions() -> usize {
    5
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchConfig {
    pub reach: Option<ReachBench>,
    pub analyzer: Option<AnalyzerBench>,
    #[serde(default = "default_repetitions")]
    pub repetitions: usize,
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        let input = Hyperrect::from_slices(&[0.0, 0.0], &[1.0, 1.0]).expect("valid box");
        Self {
            reach: Some(ReachBench {
                controller_seeds: (0..3).collect(),
                horizon: 5,
                noise: None,
                partition_counts: vec![4, 4],
                samples: 2000,
            }),
            analyzer: Some(AnalyzerBench {
                net_seeds: (0..3).collect(),
                dims: vec![2, 50, 2],
                input,
                budgets: vec![1, 25, 50, 100],
                partitioners: vec![PartitionerKind::SimGuided, PartitionerKind::GreedySimGuided],
                analyzer: AnalyzerConfig {
                    termination: crate::partition::Termination::calls(1),
                    ..AnalyzerConfig::default()
                },
            }),
            repetitions: default_repetitions(),
            seed: 0,
        }
    }
}

/// Parses a JSON config document.
pub fn parse<T: for<'de> Deserialize<'de>>(text: &str) -> Result<T> {
    serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))
}

/// Reads and parses a config file; read failures count as config errors.
pub fn read<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    parse(&text)
}
