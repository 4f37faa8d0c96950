use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use nlw_core::experiments::{configured_stages, run_config, ExperimentConfig, RunOptions, Stage};
use nlw_core::Error;

#[derive(Parser)]
#[command(name = "nlw", version, about = "Nonlocal Wasserstein gradient flows on the torus")]
struct Cli {
    /// Experiment config (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory; overrides `outputs.directory`.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Sampler seed; overrides `sampler.seed`.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for all parallel stages.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Print nothing on success.
    #[arg(long, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Clone, Copy)]
enum Command {
    /// Discretize the kernel and measure and write the system file.
    Build,
    /// Run the gradient flow.
    Solve,
    /// Compute the configured distance.
    Metric,
    /// Check the log-Sobolev inequality and decay envelope along the flow.
    Certify,
    /// Simulate the jump process and compare with the flow.
    Sample,
    /// Run the level-refinement study.
    Refine,
    /// Every stage the config defines.
    Run,
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Validation { .. }
        | Error::InvalidArgument(_)
        | Error::DimensionMismatch { .. }
        | Error::GridTooLarge { .. }
        | Error::InvalidState(_)
        | Error::NotAntisymmetric(_)
        | Error::Io(_)
        | Error::Serialization(_) => 2,
        Error::Certificate(_) => 4,
        Error::DiagonalSingularity
        | Error::Divergent(_)
        | Error::Quadrature(_)
        | Error::Coverage
        | Error::ZeroCellMass { .. }
        | Error::Integrator(_)
        | Error::Optimizer(_) => 3,
    }
}

fn execute(cli: &Cli) -> Result<Vec<String>, Error> {
    let path = cli.config.as_ref().ok_or_else(|| Error::Validation {
        path: "--config".into(),
        message: "a config file is required".into(),
    })?;
    let cfg = ExperimentConfig::load(path)?;
    let stages = match cli.command {
        Command::Build => vec![Stage::Build],
        Command::Solve => vec![Stage::Build, Stage::Flow],
        Command::Metric => vec![Stage::Build, Stage::Metric],
        Command::Certify => vec![Stage::Build, Stage::Certify],
        Command::Sample => vec![Stage::Build, Stage::Sample],
        Command::Refine => vec![Stage::Build, Stage::Refine],
        Command::Run => configured_stages(&cfg),
    };
    let opts = RunOptions {
        out_dir: cli.out.clone(),
        seed: cli.seed,
    };
    let summary = run_config(&cfg, &stages, &opts)?;
    let mut lines = summary.messages;
    lines.push(format!(
        "wrote {} artifacts to {}",
        summary.manifest.artifacts.len(),
        summary.out_dir.display()
    ));
    Ok(lines)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(k) = cli.threads {
        if k == 0 {
            eprintln!("error: --threads must be at least 1");
            return ExitCode::from(2);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(k).build_global() {
            eprintln!("error: cannot configure thread pool: {e}");
            return ExitCode::from(2);
        }
    }
    match execute(&cli) {
        Ok(lines) => {
            if !cli.quiet {
                for l in lines {
                    println!("{l}");
                }
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
