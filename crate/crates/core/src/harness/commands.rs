//! Command implementations shared by the CLI and the tests.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::Array1;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::carrl::{episode_rollout, q_lower_bounds, AgentMode, DiscreteDoubleIntegrator};
use crate::closed_loop::{
    double_integrator_loop, double_integrator_x0, error_metric, partitioned_reach, reach_sequence, simulate, verify_reach_avoid,
    ClosedLoopPartitioner, NeuralFeedbackLoop, ReachSequence, StateSet,
};
use crate::error::{Error, Result};
use crate::geometry::{Hyperrect, Point2, WeightedBall};
use crate::partition::{analyze, AnalyzerConfig, OutputEstimate, OutputShape, Termination};
use crate::problems::{minimal_adversarial_eps, strict_argmax, verdict_from_margins, Status, DEFAULT_EPS_TOL};
use crate::propagators::Specification;

use super::config::{AnalyzeConfig, BenchConfig, CarrlConfig, Problem, ReachConfig};
use super::results::{
    median, timed, AnalyzeOutput, AreaRow, BenchOutput, CarrlOutput, CellDoc, EpisodeDoc, Payload, ReachOutput, ReachRow, RunResult,
    SelfCheck,
};

pub const EXIT_OK: i32 = 0;
pub const EXIT_NOT_VERIFIED: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_INTERNAL: i32 = 3;

const SELF_CHECK_SAMPLES: usize = 1000;
const PLOT_SAMPLES: usize = 200;

/// Exit status for an error: bad input is a usage error, the rest internal.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config(_) | Error::Json(_) | Error::Io(_) | Error::FormatVersion(_) | Error::UnknownActivation(_) => EXIT_USAGE,
        _ => EXIT_INTERNAL,
    }
}

#[derive(Debug, Clone)]
pub struct RunOptions {
    /// Overrides the seed in the config.
    pub seed: Option<u64>,
    pub self_check: bool,
    /// Timed repetitions after the warm-up run.
    pub repetitions: usize,
}

impl Default for RunOptions {
    fn default() -> Self {
        Self {
            seed: None,
            self_check: false,
            repetitions: 5,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Outcome {
    pub result: RunResult,
    pub exit_code: i32,
}

fn to_value<T: Serialize>(v: &T) -> serde_json::Value {
    serde_json::to_value(v).expect("configs serialize")
}

fn check_failed(check: &Option<SelfCheck>) -> Result<()> {
    match check {
        Some(c) if c.violations > 0 => Err(Error::Specification(format!(
            "self-check found {} of {} samples outside the reported sets",
            c.violations, c.samples
        ))),
        _ => Ok(()),
    }
}

fn point2(v: ndarray::ArrayView1<f64>) -> Point2 {
    [v[0], if v.len() > 1 { v[1] } else { 0.0 }]
}

pub fn run_analyze(cfg: &AnalyzeConfig, base: &Path, opts: &RunOptions) -> Result<Outcome> {
    let mut cfg = cfg.clone();
    if let Some(s) = opts.seed {
        cfg.analyzer.seed = s;
    }
    let net = cfg.network.load(base)?;
    let mut timings = BTreeMap::new();
    let mut out = AnalyzeOutput::default();
    let mut exit = EXIT_OK;
    let mut check = None;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.analyzer.seed.wrapping_add(1));

    match &cfg.problem {
        Problem::OutputBall { input } | Problem::Verify { input, .. } => {
            let (spec, shape, label) = match &cfg.problem {
                Problem::Verify { label, .. } => {
                    let label = match label {
                        Some(l) => *l,
                        None => strict_argmax(&net.forward(input.center().view())?)?,
                    };
                    (Specification::classification(net.output_dim(), label)?, OutputShape::LowerBounds, Some(label))
                }
                _ => (Specification::identity(net.output_dim()), OutputShape::LinfBall, None),
            };
            let acfg = AnalyzerConfig {
                output_shape: shape,
                ..cfg.analyzer.clone()
            };
            let (res, t) = timed(opts.repetitions, || analyze(&net, input, &spec, &acfg))?;
            timings.insert("analyze".to_string(), t);
            out.propagator_calls = res.propagator_calls;
            out.under_interval = Some(res.under.interval.clone());
            out.cells = res
                .cells
                .iter()
                .map(|c| CellDoc {
                    input: c.input.clone(),
                    lower: c.output.lower.to_vec(),
                    upper: c.output.upper.to_vec(),
                    depth: c.refined_depth,
                })
                .collect();
            out.samples = res.under.samples.rows().into_iter().take(PLOT_SAMPLES).map(point2).collect();
            match (label, &res.estimate) {
                (Some(_), OutputEstimate::LowerBounds(l)) => {
                    out.problem = "verify".into();
                    let v = verdict_from_margins(l);
                    if v.status != Status::Verified {
                        exit = EXIT_NOT_VERIFIED;
                    }
                    if opts.self_check {
                        let mut bad = 0;
                        for _ in 0..SELF_CHECK_SAMPLES {
                            let m = spec.apply(net.forward(input.sample(&mut rng).view())?.view());
                            bad += usize::from(m.iter().zip(l.iter()).any(|(a, b)| a < b));
                        }
                        check = Some(SelfCheck { samples: SELF_CHECK_SAMPLES, violations: bad });
                    }
                    out.verdict = Some(v);
                }
                (_, OutputEstimate::Box(b)) => {
                    out.problem = "output_ball".into();
                    if opts.self_check {
                        let mut bad = 0;
                        for _ in 0..SELF_CHECK_SAMPLES {
                            bad += usize::from(!b.contains(net.forward(input.sample(&mut rng).view())?.view()));
                        }
                        check = Some(SelfCheck { samples: SELF_CHECK_SAMPLES, violations: bad });
                    }
                    out.output_box = Some(b.clone());
                }
                _ => unreachable!("shape fixed above"),
            }
        }
        Problem::MinimalEps { x_nom, p, tol } => {
            out.problem = "minimal_eps".into();
            let x = Array1::from(x_nom.clone());
            let tol = tol.unwrap_or(DEFAULT_EPS_TOL);
            let (r, t) = timed(opts.repetitions, || minimal_adversarial_eps(&net, &x, *p, &cfg.analyzer, tol))?;
            timings.insert("minimal_eps".to_string(), t);
            if opts.self_check && r.certified_lower > 0.0 {
                let label = strict_argmax(&net.forward(x.view())?)?;
                let ball = WeightedBall::uniform(x.clone(), r.certified_lower, *p)?;
                let mut bad = 0;
                for _ in 0..SELF_CHECK_SAMPLES {
                    let y = net.forward(ball.sample(&mut rng).view())?;
                    bad += usize::from(y.iter().enumerate().any(|(i, &v)| i != label && v >= y[label]));
                }
                check = Some(SelfCheck { samples: SELF_CHECK_SAMPLES, violations: bad });
            }
            out.minimal_eps = Some(r);
        }
    }
    check_failed(&check)?;
    Ok(Outcome {
        result: RunResult {
            command: "analyze".into(),
            seed: cfg.analyzer.seed,
            config: to_value(&cfg),
            result: Payload::Analyze(out),
            self_check: check,
            timings,
        },
        exit_code: exit,
    })
}

fn run_reach_sequence(nfl: &NeuralFeedbackLoop, cfg: &ReachConfig) -> Result<(ReachSequence, Vec<Hyperrect>, usize)> {
    let a_out = cfg.a_out()?;
    match (&cfg.partitioner, &cfg.x0) {
        (ClosedLoopPartitioner::None, x0) => Ok((reach_sequence(nfl, x0, cfg.horizon, a_out.as_ref())?, Vec::new(), 1)),
        (p, StateSet::Rect(x0)) => {
            if a_out.is_some() {
                return Err(Error::Config("partitioned reachability produces boxes; drop a_out".into()));
            }
            let r = partitioned_reach(nfl, x0, cfg.horizon, None, p, cfg.seed)?;
            Ok((r.fused, r.cells, r.reach_calls))
        }
        _ => Err(Error::Config("partitioning needs a box initial set".into())),
    }
}

fn reach_outcome(cfg: &ReachConfig, base: &Path, opts: &RunOptions, command: &str) -> Result<Outcome> {
    let mut cfg = cfg.clone();
    if let Some(s) = opts.seed {
        cfg.seed = s;
    }
    if command == "verify" && cfg.reach_avoid.is_none() {
        return Err(Error::Config("verify needs a reach_avoid section".into()));
    }
    let nfl = NeuralFeedbackLoop::new(cfg.system.build()?, cfg.policy.load(base)?)?;
    let ((seq, cells, calls), t) = timed(opts.repetitions, || run_reach_sequence(&nfl, &cfg))?;
    let mut timings = BTreeMap::new();
    timings.insert("reach".to_string(), t);

    let mut out = ReachOutput {
        reach_calls: calls,
        cells,
        ..ReachOutput::default()
    };
    if cfg.samples > 0 {
        let rollouts = simulate(&nfl, &cfg.x0, cfg.horizon, cfg.samples, cfg.seed, true)?;
        if nfl.system().nx() >= 2 {
            match error_metric(&seq, &rollouts, [0, 1]) {
                Ok(e) => {
                    out.final_error = e.last().copied();
                    out.errors = e;
                }
                Err(Error::DegenerateMetric(_)) => {}
                Err(e) => return Err(e),
            }
        }
        out.samples = rollouts
            .iter()
            .map(|s| s.rows().into_iter().take(PLOT_SAMPLES / 2).map(point2).collect())
            .collect();
    }
    let mut exit = EXIT_OK;
    if let Some(spec) = &cfg.reach_avoid {
        let report = verify_reach_avoid(&seq, spec)?;
        if command == "verify" && !report.verified {
            exit = EXIT_NOT_VERIFIED;
        }
        out.verdict = Some(report);
    }
    let check = if opts.self_check {
        let rollouts = simulate(&nfl, &cfg.x0, cfg.horizon, SELF_CHECK_SAMPLES, cfg.seed.wrapping_add(1), true)?;
        let mut bad = 0;
        for i in 0..SELF_CHECK_SAMPLES {
            bad += usize::from((0..=cfg.horizon).any(|t| !seq.sets[t].contains(rollouts[t].row(i))));
        }
        Some(SelfCheck { samples: SELF_CHECK_SAMPLES, violations: bad })
    } else {
        None
    };
    check_failed(&check)?;
    out.sets = seq.sets;
    Ok(Outcome {
        result: RunResult {
            command: command.into(),
            seed: cfg.seed,
            config: to_value(&cfg),
            result: Payload::Reach(out),
            self_check: check,
            timings,
        },
        exit_code: exit,
    })
}

pub fn run_reach(cfg: &ReachConfig, base: &Path, opts: &RunOptions) -> Result<Outcome> {
    reach_outcome(cfg, base, opts, "reach")
}

pub fn run_verify(cfg: &ReachConfig, base: &Path, opts: &RunOptions) -> Result<Outcome> {
    reach_outcome(cfg, base, opts, "verify")
}

fn mode_name(m: AgentMode) -> &'static str {
    match m {
        AgentMode::Nominal => "nominal",
        AgentMode::Carrl => "carrl",
    }
}

pub fn run_carrl(cfg: &CarrlConfig, base: &Path, opts: &RunOptions) -> Result<Outcome> {
    let mut cfg = cfg.clone();
    if let Some(s) = opts.seed {
        cfg.seed = s;
    }
    let qnet = cfg.qnet.load(base)?;
    let env = DiscreteDoubleIntegrator::default();
    let rob = cfg.robust();
    let run_all = || -> Result<Vec<EpisodeDoc>> {
        let mut docs = Vec::new();
        for &mode in &cfg.modes {
            for e in 0..cfg.episodes as u64 {
                let seed = cfg.seed.wrapping_add(e);
                let episode = episode_rollout(&env, &qnet, mode, &cfg.adversary, &rob, cfg.horizon, seed)?;
                docs.push(EpisodeDoc { mode, seed, episode });
            }
        }
        Ok(docs)
    };
    let (episodes, t) = timed(opts.repetitions, run_all)?;
    let mut timings = BTreeMap::new();
    timings.insert("episodes".to_string(), t);
    let mut mean_return = BTreeMap::new();
    for &mode in &cfg.modes {
        let rets: Vec<f64> = episodes.iter().filter(|d| d.mode == mode).map(|d| d.episode.total_return).collect();
        if !rets.is_empty() {
            mean_return.insert(mode_name(mode).to_string(), rets.iter().sum::<f64>() / rets.len() as f64);
        }
    }
    let check = if opts.self_check {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1));
        let (mut bad, mut total) = (0, 0);
        let obs: Vec<&Vec<f64>> = episodes.iter().flat_map(|d| d.episode.observations.iter()).collect();
        if !obs.is_empty() && rob.eps.iter().any(|&e| e > 0.0) {
            let per = SELF_CHECK_SAMPLES.div_ceil(obs.len());
            for o in obs {
                let s = Array1::from(o.clone());
                let ql = q_lower_bounds(&qnet, &s, &rob)?;
                let ball = WeightedBall::new(s, Array1::from(rob.eps.clone()), rob.p)?;
                for _ in 0..per {
                    let q = qnet.forward(ball.sample(&mut rng).view())?;
                    bad += usize::from(q.iter().zip(ql.iter()).any(|(a, b)| a < b));
                    total += 1;
                }
            }
        }
        Some(SelfCheck { samples: total, violations: bad })
    } else {
        None
    };
    check_failed(&check)?;
    Ok(Outcome {
        result: RunResult {
            command: "carrl-sim".into(),
            seed: cfg.seed,
            config: to_value(&cfg),
            result: Payload::Carrl(CarrlOutput { episodes, mean_return }),
            self_check: check,
            timings,
        },
        exit_code: EXIT_OK,
    })
}

pub fn run_bench(cfg: &BenchConfig, opts: &RunOptions) -> Result<Outcome> {
    let mut cfg = cfg.clone();
    if let Some(s) = opts.seed {
        cfg.seed = s;
    }
    let reps = cfg.repetitions.max(1);
    let mut out = BenchOutput::default();
    let mut timings = BTreeMap::new();

    if let Some(rb) = &cfg.reach {
        let x0 = double_integrator_x0();
        let methods = [
            ("reach_lp", ClosedLoopPartitioner::None),
            ("reach_lp_partition", ClosedLoopPartitioner::Uniform { counts: rb.partition_counts.clone() }),
        ];
        let mut times: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
        for &seed in &rb.controller_seeds {
            let nfl = double_integrator_loop(crate::closed_loop::benchmark_controller(seed), rb.noise)?;
            let rollouts = simulate(&nfl, &StateSet::Rect(x0.clone()), rb.horizon, rb.samples, cfg.seed, true)?;
            for (name, part) in &methods {
                let (r, t) = timed(reps, || partitioned_reach(&nfl, &x0, rb.horizon, None, part, cfg.seed))?;
                times.entry(name).or_default().push(t);
                let errors = error_metric(&r.fused, &rollouts, [0, 1])?;
                out.reach.push(ReachRow {
                    method: name.to_string(),
                    controller_seed: seed,
                    final_error: *errors.last().expect("horizon >= 1"),
                    errors,
                });
            }
        }
        for (name, mut v) in times {
            timings.insert(format!("reach/{name}"), median(&mut v));
        }
    }

    if let Some(ab) = &cfg.analyzer {
        let spec = Specification::identity(*ab.dims.last().ok_or_else(|| Error::Config("empty dims".into()))?);
        let mut times: BTreeMap<String, Vec<f64>> = BTreeMap::new();
        for &net_seed in &ab.net_seeds {
            let net = super::config::NetSource::Random { dims: ab.dims.clone(), seed: net_seed }.load(Path::new("."))?;
            for part in &ab.partitioners {
                for &budget in &ab.budgets {
                    let acfg = AnalyzerConfig {
                        partitioner: part.clone(),
                        output_shape: OutputShape::LinfBall,
                        termination: Termination::calls(budget),
                        seed: cfg.seed,
                        ..ab.analyzer.clone()
                    };
                    let (res, t) = timed(reps, || analyze(&net, &ab.input, &spec, &acfg))?;
                    times.entry(format!("analyzer/{}", serde_json::to_value(part)?["kind"].as_str().unwrap_or("?"))).or_default().push(t);
                    out.analyzer.push(AreaRow {
                        net_seed,
                        partitioner: part.clone(),
                        budget,
                        area: res.estimate.area().unwrap_or(f64::NAN),
                    });
                }
            }
        }
        for (name, mut v) in times {
            timings.insert(name, median(&mut v));
        }
    }

    Ok(Outcome {
        result: RunResult {
            command: "bench".into(),
            seed: cfg.seed,
            config: to_value(&cfg),
            result: Payload::Bench(out),
            self_check: None,
            timings,
        },
        exit_code: EXIT_OK,
    })
}

/// Writes `result.json` and, where the command has one, `plot.svg`.
pub fn write_outputs(dir: &Path, result: &RunResult) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join("result.json"), result.to_json())?;
    if let Some(kind) = super::svg::default_kind(&result.result) {
        std::fs::write(dir.join("plot.svg"), super::svg::plot_svg(result, kind)?)?;
    }
    Ok(())
}

