use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use sfcl::runner::{compare_runs, dump_dataset, format_table, run_experiment};
use sfcl::{corrupt_files, CliError, CliResult, RunConfig};
use sfcl_core::annsim::DifficultyParams;

#[derive(Parser)]
#[command(name = "sfcl", version, about = "Split federated co-learning experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment from a config file.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Train clients one after another on the main thread.
        #[arg(long)]
        deterministic: bool,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Deform a label mask the way a hurried annotator might.
    Corrupt {
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        label: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 2.0)]
        rho: f64,
        #[arg(long, default_value_t = 1.0)]
        amax_scale: f64,
        /// Normal sampling offset in pixels; defaults to max(1, w/4).
        #[arg(long)]
        delta: Option<f64>,
        #[arg(long, default_value_t = 2)]
        classes: u8,
        /// Accepted for uniformity; the deformation is deterministic.
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Tabulate final metrics of finished runs.
    Compare {
        #[arg(long, num_args = 1.., required = true)]
        runs: Vec<PathBuf>,
    },
    /// Write the generated federation as PGM pairs with a manifest.
    Dump {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn execute(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Run { config, deterministic, out } => {
            let config = RunConfig::load(&config)?;
            let outcome = run_experiment(&config, Some(&out), deterministic)?;
            println!("{}", format_table(&[outcome.final_row]).trim_end());
        }
        Command::Corrupt { image, label, out, rho, amax_scale, delta, classes, seed: _ } => {
            let params = DifficultyParams { rho, amax_scale, delta, ..DifficultyParams::default() };
            corrupt_files(&image, &label, &out, &params, classes)?;
        }
        Command::Compare { runs } => {
            print!("{}", format_table(&compare_runs(&runs)?));
        }
        Command::Dump { config, out } => {
            let config = RunConfig::load(&config)?;
            let manifest = dump_dataset(&config, &out)?;
            println!("{}", manifest.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match execute(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &CliError) -> u8 {
    e.exit_code() as u8
}
