use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use gestalt_core::harness::{
    cmd_build_memory, cmd_eval, cmd_gen_deficient, cmd_report, cmd_sweep, cmd_train, ExperimentConfig, HarnessError,
    Mode, Workspace,
};

#[derive(Parser)]
#[command(name = "gestalt", version, about = "Occluded-digit experiments with an eigen-image intuition layer")]
struct Cli {
    /// Experiment config (TOML).
    #[arg(long, global = true, default_value = "gestalt.toml")]
    config: PathBuf,
    /// Overrides the seed in the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the CNN on the training set.
    Train,
    /// Build the eigen-image bank and stock set from the trained CNN.
    BuildMemory,
    /// Write the deficient test sets.
    GenDeficient,
    /// Evaluate one mode over every deficient set.
    Eval {
        /// `none` or a gate threshold in [0, 1].
        #[arg(long)]
        mode: Mode,
    },
    /// Evaluate no-intuition and every configured threshold.
    Sweep,
    /// Print the comparison table from a results CSV.
    Report {
        /// Defaults to results.csv in the work directory.
        #[arg(long)]
        csv: Option<PathBuf>,
        /// Defaults to the config's report threshold.
        #[arg(long)]
        threshold: Option<f64>,
    },
}

fn run(cli: Cli) -> Result<(), HarnessError> {
    let mut cfg = ExperimentConfig::load(&cli.config)?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    match cli.command {
        Command::Train => {
            let path = cmd_train(&cfg)?;
            println!("wrote {}", path.display());
        }
        Command::BuildMemory => {
            let path = cmd_build_memory(&cfg)?;
            println!("wrote {}", path.display());
        }
        Command::GenDeficient => {
            let files = cmd_gen_deficient(&cfg)?;
            println!("wrote {} files", files.len());
        }
        Command::Eval { mode } => {
            for r in cmd_eval(&cfg, mode)? {
                println!("s = {:2}  {:>5}  {:6.2}%", r.s, r.mode, 100.0 * r.accuracy());
            }
        }
        Command::Sweep => {
            cmd_sweep(&cfg)?;
            let ws = Workspace::of(&cfg);
            print!("{}", cmd_report(&ws.results_csv(), cfg.experiment.report_threshold)?);
        }
        Command::Report { csv, threshold } => {
            let csv = csv.unwrap_or_else(|| Workspace::of(&cfg).results_csv());
            let t = threshold.unwrap_or(cfg.experiment.report_threshold);
            print!("{}", cmd_report(&csv, t)?);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
