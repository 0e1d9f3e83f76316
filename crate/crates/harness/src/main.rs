use std::path::{Path, PathBuf};
use std::process::ExitCode;

use calico::config::{parse_stop_when, ExperimentConfig, Overrides, Protocol};
use calico::experiment::run_experiment;
use calico::report;
use calico::serve::ServedRun;
use calico::Result;
use clap::{Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(name = "calico", version, about = "Calibrated active learning experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum ProtocolArg {
    Desk,
    Paper,
}

#[derive(Subcommand)]
enum Command {
    /// Run every seed of an experiment with the simulated oracle.
    Run {
        config: PathBuf,
        /// Dataset path, or `synthetic:classes=3,per_class=400,sigma=0.45`.
        #[arg(long)]
        dataset: Option<String>,
        /// Run a single seed instead of the configured list.
        #[arg(long)]
        seed: Option<u64>,
        /// Stop early, e.g. `acc>=0.95` or `acc>=95%`.
        #[arg(long, value_name = "acc>=X")]
        stop_when: Option<String>,
        #[arg(long, value_enum, default_value = "desk")]
        protocol: ProtocolArg,
    },
    /// Run the first seed against human annotators over HTTP.
    Serve {
        /// Configuration file, or an experiment directory to resume.
        #[arg(long)]
        run: PathBuf,
        #[arg(long, default_value = "127.0.0.1:8080")]
        bind: String,
    },
    /// Re-emit tables and figures from stored runs.
    Report { dir: PathBuf },
    /// Print Best and Final ACC / ECE for several experiments side by side.
    Compare {
        #[arg(required = true)]
        dirs: Vec<PathBuf>,
        /// Also write the comparison as CSV.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
}

fn load_for_serve(path: &Path) -> Result<(ExperimentConfig, PathBuf)> {
    if path.is_dir() {
        let cfg: ExperimentConfig = serde_json::from_slice(&std::fs::read(path.join("experiment.json"))?)?;
        Ok((cfg, path.to_path_buf()))
    } else {
        let cfg = ExperimentConfig::from_file(path, &Overrides::default())?;
        let dir = cfg.output_dir();
        Ok((cfg, dir))
    }
}

fn execute(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Run { config, dataset, seed, stop_when, protocol } => {
            let overrides = Overrides {
                dataset,
                seed,
                stop_accuracy: stop_when.as_deref().map(parse_stop_when).transpose()?,
                protocol: match protocol {
                    ProtocolArg::Desk => Protocol::Desk,
                    ProtocolArg::Paper => Protocol::Paper,
                },
            };
            let cfg = ExperimentConfig::from_file(&config, &overrides)?;
            let outcome = run_experiment(&cfg)?;
            for failure in &outcome.failures {
                eprintln!("seed {} failed: {}", failure.seed, failure.reason);
            }
            print!("{}", std::fs::read_to_string(outcome.dir.join("summary.csv"))?);
            println!("artifacts in {}", outcome.dir.display());
        }
        Command::Serve { run, bind } => {
            let (cfg, dir) = load_for_serve(&run)?;
            let mut served = ServedRun::start(&cfg, &dir, &bind)?;
            println!("annotation service on http://{} (seed {})", served.addr(), served.seed);
            let log = served.wait()?;
            println!("run finished after {} rounds: {:?}", log.rounds.len(), log.status);
            served.shutdown()?;
        }
        Command::Report { dir } => {
            report::emit(&dir)?;
            print!("{}", std::fs::read_to_string(dir.join("summary.csv"))?);
        }
        Command::Compare { dirs, csv } => {
            let cmp = report::compare(&dirs)?;
            print!("{}", cmp.text);
            if let Some(path) = csv {
                std::fs::write(path, cmp.csv)?;
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match execute(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
