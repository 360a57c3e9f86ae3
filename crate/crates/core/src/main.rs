use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use nsslip::cli::{run, RunConfig};
use nsslip::Error;

#[derive(Parser)]
#[command(name = "nsslip", version, about = "Stabilized Navier-Stokes solver with Nitsche slip boundaries")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a refinement study described by a key = value config file.
    Run {
        config: PathBuf,
        /// Replace a config entry, e.g. `--override nu=0.01`. Repeatable.
        #[arg(long = "override", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        /// Single-threaded factorization and assembly for bitwise-reproducible output.
        #[arg(long)]
        deterministic: bool,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let Command::Run { config, overrides, deterministic } = Cli::parse().command;
    if deterministic {
        faer::set_global_parallelism(faer::Par::Seq);
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(1).build_global() {
            eprintln!("error: {e}");
            return ExitCode::FAILURE;
        }
    }
    let cfg = match RunConfig::from_file(&config, &overrides) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    };
    match run(&cfg) {
        Ok(summary) => {
            if let Some(c) = summary.vortex {
                println!("vortex center: x = {:.4}; y = {:.4}", c[0], c[1]);
            }
            println!("wrote {} level(s) to {}", summary.records.len(), cfg.output.display());
            ExitCode::SUCCESS
        }
        Err(e @ Error::Config(_)) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
