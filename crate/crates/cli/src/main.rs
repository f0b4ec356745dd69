use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand, ValueEnum};
use petbench::config::RunConfig;
use petbench::rs_compare::DEFAULT_N_LIST;
use petbench::sweep::{run_sweep, SweepGrid};
use petbench_core::PetMode;

#[derive(Parser)]
#[command(name = "petbench", version = petbench::VERSION, about = "Pessimistic reward fine-tuning testbed")]
struct Cli {
    /// JSON run configuration; defaults to the built-in scenario.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed, overriding the config file.
    #[arg(long, global = true, env = "PETBENCH_SEED")]
    seed: Option<u64>,
    /// Output directory, overriding the config file.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads for sweeps and replicates.
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// PET variant, overriding the config file.
    #[arg(long, global = true, value_enum)]
    mode: Option<Mode>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Exact,
    Sampled,
}

#[derive(Subcommand)]
enum Command {
    /// World, data, proxy reward, PET, policy optimization and evaluation.
    Pipeline,
    /// True value of rejection sampling on the proxy and PET rewards.
    RsCompare {
        #[arg(long, value_delimiter = ',', default_values_t = DEFAULT_N_LIST)]
        n: Vec<usize>,
        #[arg(long, default_value_t = 10)]
        replicates: usize,
    },
    /// Property suite; exits non-zero if any property fails.
    Verify,
    /// Cartesian parameter sweep, one pipeline run per cell and replicate.
    Sweep {
        #[arg(long)]
        grid: PathBuf,
    },
    /// World generation.
    World {
        #[command(subcommand)]
        command: WorldCommand,
    },
    /// Re-evaluate policies from the artifacts of a pipeline run.
    Eval {
        /// Directory of a previous pipeline run.
        #[arg(long)]
        run: PathBuf,
    },
}

#[derive(Subcommand)]
enum WorldCommand {
    /// Write world.json for the configured world.
    Gen,
}

fn load_config(cli: &Cli) -> anyhow::Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::from_file(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &cli.out {
        cfg.output_dir = out.clone();
    }
    if let Some(mode) = cli.mode {
        cfg.pet.mode = match mode {
            Mode::Exact => PetMode::Exact,
            Mode::Sampled => PetMode::Sampled,
        };
    }
    Ok(cfg)
}

fn run(cli: &Cli) -> anyhow::Result<bool> {
    if let Some(jobs) = cli.jobs {
        rayon::ThreadPoolBuilder::new()
            .num_threads(jobs.max(1))
            .build_global()
            .context("building worker pool")?;
    }
    let cfg = load_config(cli)?;
    let out = cfg.output_dir.clone();
    match &cli.command {
        Command::Pipeline => {
            let run = petbench::cmd_pipeline(&cfg, &out)?;
            for r in &run.rows {
                println!(
                    "{:<16} {:<6} eta={:<5} V_true={:.4} KL={}",
                    r.method, r.reward_model, r.eta, r.v_true, r.kl
                );
            }
            println!("artifacts in {}", out.display());
        }
        Command::RsCompare { n, replicates } => {
            let rows = petbench::cmd_rs_compare(&cfg, n, *replicates, &out)?;
            for r in rows.iter().filter(|r| r.seed == "mean") {
                println!(
                    "n={:<4} RS-proxy {:.4}  RS-PET {:.4}",
                    r.n, r.v_true_proxy, r.v_true_pet
                );
            }
        }
        Command::Verify => {
            let (results, ok) = petbench::cmd_verify(cfg.seed);
            for r in &results {
                println!("{}", r.line());
            }
            return Ok(ok);
        }
        Command::Sweep { grid } => {
            let grid = SweepGrid::from_file(grid)?;
            let rows = run_sweep(&cfg, &grid, &out)?;
            let failed = rows.iter().filter(|r| r.status != "ok").count();
            println!(
                "{} rows, {failed} failed runs, written to {}",
                rows.len(),
                out.join("sweep.csv").display()
            );
        }
        Command::World {
            command: WorldCommand::Gen,
        } => {
            let w = petbench::cmd_world_gen(&cfg, &out)?;
            println!(
                "world {}x{} written to {}",
                w.n_prompts(),
                w.n_responses(),
                out.join("world.json").display()
            );
        }
        Command::Eval { run } => {
            let rows = petbench::cmd_eval(run, &out)?;
            println!("{} rows written to {}", rows.len(), out.join("report.csv").display());
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
