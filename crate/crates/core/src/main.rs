use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use deepslicing::harness::{self, Experiment, Method, Overrides};
use deepslicing::Result;

#[derive(Parser)]
#[command(name = "deepslicing", version, about = "ADMM-based multi-slice resource allocation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct Common {
    /// Scenario TOML; the generated 3x5 scenario is used when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    max_iters: Option<usize>,
    #[arg(long)]
    eta: Option<f64>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

impl Common {
    fn overrides(&self) -> Overrides {
        Overrides {
            seed: self.seed,
            max_iters: self.max_iters,
            eta: self.eta,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train and checkpoint one agent per slice.
    Train {
        #[command(flatten)]
        common: Common,
    },
    /// Solve a scenario and write its trace CSV.
    Solve {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = "admms")]
        method: String,
        /// Directory holding agent checkpoints (deepslicing only).
        #[arg(long)]
        agents: Option<PathBuf>,
    },
    /// Run an experiment: convergence, allocation, scalability, cdf, models.
    Experiment {
        name: String,
        #[command(flatten)]
        common: Common,
        /// Checkpoint directory; missing agents are trained into it.
        #[arg(long)]
        agents: Option<PathBuf>,
    },
    /// Run the numerical self-checks.
    Validate,
    /// Write the scenario (generated or loaded, after overrides) as TOML.
    Config {
        #[command(flatten)]
        common: Common,
    },
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Train { common } => {
            let cfg = harness::load_config(common.config.as_deref(), common.overrides())?;
            for path in harness::cmd_train(&cfg, &common.out)? {
                println!("{}", path.display());
            }
        }
        Command::Solve {
            common,
            method,
            agents,
        } => {
            let method: Method = method.parse()?;
            let cfg = harness::load_config(common.config.as_deref(), common.overrides())?;
            let summary = harness::cmd_solve(&cfg, method, agents.as_deref(), &common.out)?;
            println!("{summary}");
        }
        Command::Experiment {
            name,
            common,
            agents,
        } => {
            let name: Experiment = name.parse()?;
            let cfg = harness::load_config(common.config.as_deref(), common.overrides())?;
            let agents = agents.unwrap_or_else(|| common.out.join("agents"));
            for path in harness::cmd_experiment(name, &cfg, &common.out, &agents)? {
                println!("{}", path.display());
            }
        }
        Command::Validate => {
            let report = deepslicing::check::run_validation()?;
            print!("{}", report.to_json_lines());
            return Ok(report.passed());
        }
        Command::Config { common } => {
            let cfg = harness::load_config(common.config.as_deref(), common.overrides())?;
            let path = common.out.join("scenario.toml");
            cfg.save(&path)?;
            println!("{}", path.display());
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
