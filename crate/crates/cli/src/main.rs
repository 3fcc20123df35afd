use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use cpt_cli::commands::describe;
use cpt_cli::run::workers_from_env;
use cpt_cli::{cmd_gen_data, cmd_run, cmd_table, cmd_verify, CliResult, RunOptions};

/// Continual post-training lab.
#[derive(Parser)]
#[command(name = "cpt", version)]
struct Cli {
    /// More log output on stderr (repeat for more).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run every (variant, order, seed) sequence of an experiment file.
    Run {
        config: PathBuf,
        /// Added to every configured seed.
        #[arg(long, default_value_t = 0)]
        seed_offset: u64,
    },
    /// Print a comparison table of the reports found under the given paths.
    Table {
        #[arg(required = true)]
        dirs: Vec<PathBuf>,
    },
    /// Diff the mask-covered parameters of a task between two checkpoints.
    Verify {
        before: PathBuf,
        after: PathBuf,
        #[arg(long)]
        task: usize,
    },
    /// Write synthetic domains from a recipe file as plain text.
    GenData {
        recipe: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn dispatch(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Run { config, seed_offset } => {
            let outcome = cmd_run(&config, RunOptions { seed_offset, workers: workers_from_env()? })?;
            for line in &outcome.lines {
                println!("{line}");
            }
            println!("results in {}", outcome.output.display());
        }
        Command::Table { dirs } => print!("{}", cmd_table(&dirs)?),
        Command::Verify { before, after, task } => println!("{}", describe(&cmd_verify(&before, &after, task)?)),
        Command::GenData { recipe, out } => {
            let names = cmd_gen_data(&recipe, &out)?;
            println!("wrote {} into {}", names.join(", "), out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
