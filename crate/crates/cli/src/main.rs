//! `fedgen` command-line runner.
//!
//! Exit status is 0 on success, 1 for bad arguments or configuration and 2
//! when a run fails after starting (divergence, I/O).

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{error::ErrorKind, Parser, Subcommand};
use fedgen_core::datasets::DatasetSpec;
use fedgen_core::experiment::{self, ExperimentConfig};
use fedgen_core::{Algorithm, Error, Result};

#[derive(Parser, Debug)]
#[command(name = "fedgen", version, about = "Federated training with learned feature masks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train one configuration and write metrics.csv and masks.csv.
    Run {
        config: PathBuf,
        /// Output directory; overrides `[output] dir`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train every algorithm at every local-epoch count.
    SweepEpochs {
        config: PathBuf,
        /// Comma-separated local-epoch counts, e.g. 20,60,100,140.
        #[arg(long, value_delimiter = ',', required = true, num_args = 1..)]
        epochs: Vec<usize>,
        /// Comma-separated algorithms; defaults to fedavg,fedgen.
        #[arg(long, value_delimiter = ',', default_value = "fedavg,fedgen")]
        algorithms: Vec<Algorithm>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train full FedGen and its three ablations on the same data.
    Ablate {
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write synthetic environments as CSV files plus manifest.toml.
    GenData {
        /// TOML file with dataset fields; missing fields take defaults.
        spec: PathBuf,
        out_dir: PathBuf,
    },
}

fn out_dir(cfg: &ExperimentConfig, flag: Option<PathBuf>) -> PathBuf {
    flag.unwrap_or_else(|| cfg.base_dir.join(&cfg.output.dir))
}

fn load_spec(path: &Path) -> Result<DatasetSpec> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    let spec: DatasetSpec = toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    spec.validate().map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    Ok(spec)
}

fn execute(command: Command) -> Result<()> {
    match command {
        Command::Run { config, out } => {
            let cfg = ExperimentConfig::load(&config)?;
            let dir = out_dir(&cfg, out);
            let result = experiment::cmd_run(&cfg, &dir)?;
            let last = result.final_report();
            println!(
                "{} rounds={} train_acc={:.4} test_acc={:.4}{}",
                result.config.algorithm,
                result.reports.len(),
                last.train_accuracy,
                last.test_accuracy,
                if result.stopped_early { " (stopped early)" } else { "" }
            );
            if let Some(msg) = result.theory.as_ref().and_then(|t| t.vacuous_message()) {
                println!("theory: {msg}");
            }
            println!("wrote {}", dir.display());
        }
        Command::SweepEpochs {
            config,
            epochs,
            algorithms,
            out,
        } => {
            let cfg = ExperimentConfig::load(&config)?;
            let dir = out_dir(&cfg, out);
            let rows = experiment::cmd_sweep_epochs(&cfg, &epochs, &algorithms, &dir)?;
            println!("algorithm,local_epochs,final_test_accuracy");
            for r in rows {
                println!("{},{},{:.4}", r.algorithm, r.local_epochs, r.final_test_accuracy);
            }
        }
        Command::Ablate { config, out } => {
            let cfg = ExperimentConfig::load(&config)?;
            let dir = out_dir(&cfg, out);
            let rows = experiment::cmd_ablate(&cfg, &dir)?;
            println!("variant,final_test_accuracy");
            for r in rows {
                println!("{},{:.4}", r.variant, r.final_test_accuracy);
            }
        }
        Command::GenData { spec, out_dir } => {
            let spec = load_spec(&spec)?;
            let manifest = experiment::cmd_gendata(&spec, &out_dir)?;
            println!(
                "wrote {} environments to {}",
                manifest.environments.len(),
                out_dir.display()
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
