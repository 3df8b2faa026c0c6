use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use formset_cli::{cmd_demo, cmd_formation, cmd_gains, cmd_simulate, cmd_ub, config, CliError, RunOptions};

#[derive(Parser)]
#[command(name = "formset", version, about = "Invariant sets, gain synthesis and tight formations for noisy formation control")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct Common {
    /// Scenario JSON (schema "formset/1").
    #[arg(long)]
    config: PathBuf,
    /// Output directory, created if missing.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Single worker and no timestamps in artifacts.
    #[arg(long)]
    deterministic: bool,
    /// Base seed, overriding the config.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Ultimate bounds of the config's LTI system, with volumes and an invariance check.
    Ub(Common),
    /// Synthesize PD gains minimizing the invariant-set volume.
    Gains(Common),
    /// Tight formations for every leader anchor.
    Formation(Common),
    /// Noisy closed-loop runs checked against the invariant sets.
    Simulate(Common),
    /// All stages in sequence.
    Demo(Common),
}

fn threads(deterministic: bool) -> Result<Option<usize>, CliError> {
    if deterministic {
        return Ok(Some(1));
    }
    match std::env::var("FORMSET_THREADS") {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(Some(n)),
            _ => Err(CliError::Config(format!("FORMSET_THREADS must be a positive integer, got {v:?}"))),
        },
        Err(_) => Ok(None),
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    let (Command::Ub(c) | Command::Gains(c) | Command::Formation(c) | Command::Simulate(c) | Command::Demo(c)) =
        &cli.command;
    if let Some(n) = threads(c.deterministic)? {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Numerical(e.to_string()))?;
    }
    let cfg = config::load(&c.config)?;
    let opts = RunOptions {
        out: c.out.clone(),
        deterministic: c.deterministic,
        seed: c.seed,
    };
    match cli.command {
        Command::Ub(_) => {
            let r = cmd_ub(&cfg, &opts)?;
            println!(
                "bounds {:?}; volume formula {:.6e}, exact {}; invariance {}",
                r.bound,
                r.volume_formula,
                r.volume_exact.map_or("n/a".into(), |v| format!("{v:.6e}")),
                if r.all_passed { "passed" } else { "FAILED" }
            );
            if !r.all_passed {
                return Err(CliError::Numerical("sampled trajectories left the invariant set".into()));
            }
        }
        Command::Gains(_) => {
            let r = cmd_gains(&cfg, &opts)?;
            println!(
                "k_p = {:.6}, k_v = {:.6}; ln volume {:.6}",
                r.gains.kp, r.gains.kv, r.log_volume
            );
        }
        Command::Formation(_) => {
            for r in cmd_formation(&cfg, &opts)? {
                println!(
                    "anchor {}: objective {:.6}, {} nodes, verified",
                    r.anchor_index, r.objective, r.nodes
                );
            }
        }
        Command::Simulate(_) => {
            let r = cmd_simulate(&cfg, &opts)?;
            let runs: usize = r.anchors.iter().map(|a| a.runs.len()).sum();
            println!("{runs} runs contained in their invariant sets");
        }
        Command::Demo(_) => {
            let r = cmd_demo(&cfg, &opts)?;
            println!(
                "k_p = {:.6}, k_v = {:.6}; {} formations; {} runs contained",
                r.gains.gains.kp,
                r.gains.gains.kv,
                r.formations.len(),
                r.simulation.anchors.iter().map(|a| a.runs.len()).sum::<usize>()
            );
        }
    }
    println!("artifacts in {}", opts.out.display());
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
