use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use sheathkit::cli::{self, CliError, Status};

#[derive(Parser)]
#[command(
    name = "sheathkit",
    version,
    about = "Kinetic plasma-sheath equilibria and stability runs"
)]
struct Args {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the pipeline selected by `mode` and write the run directory.
    Run { config: PathBuf },
    /// Check hypotheses and stability conditions without running.
    Check { config: PathBuf },
    /// Regenerate the SVG plots of an existing run directory.
    Plot { run_dir: PathBuf },
}

fn configure_threads() {
    if let Ok(v) = std::env::var("SHEATHKIT_THREADS") {
        match v.parse::<usize>() {
            Ok(n) if n > 0 => {
                let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
            }
            _ => eprintln!("warning: ignoring SHEATHKIT_THREADS={v}"),
        }
    }
}

fn dispatch(command: Command) -> Result<Status, CliError> {
    match command {
        Command::Run { config } => {
            let cfg = cli::load_config(&config)?;
            cli::execute(&cfg)
        }
        Command::Check { config } => {
            let cfg = cli::load_config(&config)?;
            let (status, checks) = cli::check(&cfg)?;
            for c in &checks {
                println!(
                    "{:<28} {:>8} value={:.6e} bound={:.6e} {}",
                    c.name,
                    format!("{:?}", c.verdict).to_lowercase(),
                    c.value,
                    c.bound,
                    c.note
                );
            }
            Ok(status)
        }
        Command::Plot { run_dir } => {
            for p in cli::plot_run_dir(&run_dir)? {
                println!("{}", p.display());
            }
            Ok(Status::Success)
        }
    }
}

fn main() -> ExitCode {
    let args = Args::parse();
    configure_threads();
    match dispatch(args.command) {
        Ok(status) => ExitCode::from(status.code() as u8),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
