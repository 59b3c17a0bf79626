//! `reachnn` command line.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use reachnn::carrl::{AdversaryConfig, AgentMode, RobustConfig};
use reachnn::geometry::Norm;
use reachnn::harness::commands::{self, Outcome, RunOptions, EXIT_USAGE};
use reachnn::harness::config::{read, AnalyzeConfig, BenchConfig, CarrlConfig, ReachConfig};
use reachnn::{Error, Result};

#[derive(Parser)]
#[command(name = "reachnn", version, about = "Reachability and robustness analysis for ReLU networks")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Global {
    /// Scenario config (JSON).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the seed in the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Writes result.json and plot.svg here instead of printing the JSON.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Re-checks every emitted set against 1000 fresh samples.
    #[arg(long, global = true)]
    self_check: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Output ball, classification check or minimal adversarial radius.
    Analyze,
    /// Closed-loop reachable sets.
    Reach,
    /// Reach-avoid verdict; exit 1 when not verified.
    Verify,
    /// Episodes with a certified-robust or nominal agent.
    CarrlSim(CarrlArgs),
    /// Reach-LP and analyzer tables.
    Bench,
}

#[derive(Args)]
struct CarrlArgs {
    #[arg(long)]
    eps_adv: Option<f64>,
    #[arg(long)]
    eps_rob: Option<f64>,
    /// Norm order, a number >= 1 or `inf`.
    #[arg(long)]
    p: Option<String>,
    #[arg(long, value_parser = ["nominal", "carrl"])]
    mode: Option<String>,
    #[arg(long)]
    horizon: Option<usize>,
}

fn required(g: &Global) -> Result<(&Path, PathBuf)> {
    let path = g.config.as_deref().ok_or_else(|| Error::Config("--config is required".into()))?;
    Ok((path, base_dir(path)))
}

fn base_dir(path: &Path) -> PathBuf {
    path.parent().map(Path::to_path_buf).unwrap_or_default()
}

fn carrl_config(g: &Global, a: &CarrlArgs) -> Result<(CarrlConfig, PathBuf)> {
    let (mut cfg, base) = match &g.config {
        Some(p) => (read::<CarrlConfig>(p)?, base_dir(p)),
        None => (CarrlConfig::default(), PathBuf::new()),
    };
    let n = cfg.adversary.eps.len();
    let p = match &a.p {
        Some(s) => {
            let v: f64 = s.parse().map_err(|_| Error::Config(format!("bad norm order {s:?}")))?;
            Norm::new(v).map_err(|e| Error::Config(e.to_string()))?
        }
        None => cfg.adversary.p,
    };
    let rob = cfg.robust();
    if let Some(e) = a.eps_adv {
        cfg.adversary = AdversaryConfig { p, ..AdversaryConfig::uniform(n, e, p) };
    }
    cfg.adversary.p = p;
    let rob_eps = a.eps_rob.map(|e| vec![e; n]).unwrap_or(rob.eps);
    cfg.robust = Some(RobustConfig { eps: rob_eps, p });
    if let Some(m) = &a.mode {
        cfg.modes = vec![if m == "nominal" { AgentMode::Nominal } else { AgentMode::Carrl }];
    }
    if let Some(h) = a.horizon {
        cfg.horizon = h;
    }
    Ok((cfg, base))
}

fn run(cli: &Cli) -> Result<Outcome> {
    let g = &cli.global;
    let opts = RunOptions {
        seed: g.seed,
        self_check: g.self_check,
        ..RunOptions::default()
    };
    match &cli.command {
        Command::Analyze => {
            let (path, base) = required(g)?;
            commands::run_analyze(&read::<AnalyzeConfig>(path)?, &base, &opts)
        }
        Command::Reach => {
            let (path, base) = required(g)?;
            commands::run_reach(&read::<ReachConfig>(path)?, &base, &opts)
        }
        Command::Verify => {
            let (path, base) = required(g)?;
            commands::run_verify(&read::<ReachConfig>(path)?, &base, &opts)
        }
        Command::CarrlSim(a) => {
            let (cfg, base) = carrl_config(g, a)?;
            commands::run_carrl(&cfg, &base, &opts)
        }
        Command::Bench => {
            let cfg = match &g.config {
                Some(p) => read::<BenchConfig>(p)?,
                None => BenchConfig::default(),
            };
            commands::run_bench(&cfg, &opts)
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { EXIT_USAGE as u8 } else { 0 });
        }
    };
    let outcome = run(&cli).and_then(|o| {
        match &cli.global.out {
            Some(dir) => commands::write_outputs(dir, &o.result)?,
            None => std::io::Write::write_all(&mut std::io::stdout(), &o.result.to_json())?,
        }
        Ok(o)
    });
    match outcome {
        Ok(o) => ExitCode::from(o.exit_code as u8),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(commands::exit_code(&e) as u8)
        }
    }
}
