use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use curvlab::cli::{list_builtin, load_config, run_with_workers, CliError, Overrides};

/// Curvature and regularity-at-infinity experiments on polynomial families.
#[derive(Parser)]
#[command(name = "lab", version)]
struct Args {
    /// Seed for every random stream; overrides the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (0 = one per core).
    #[arg(long, global = true, default_value_t = 0)]
    workers: usize,
    /// Output directory; overrides the config.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run the experiment described by a config file.
    Run { config: PathBuf },
    /// Print the built-in families.
    List,
    /// Check a config file without running it.
    Validate { config: PathBuf },
}

fn main() -> ExitCode {
    let args = Args::parse();
    let ov = Overrides {
        seed: args.seed,
        out: args.out.clone(),
    };
    let result: Result<(), CliError> = match &args.command {
        Cmd::List => {
            print!("{}", list_builtin());
            Ok(())
        }
        Cmd::Validate { config } => load_config(config, &ov).map(|cfg| {
            println!("ok: {} {:?} (config hash {})", cfg.family_label, cfg.command, cfg.hash());
        }),
        Cmd::Run { config } => load_config(config, &ov).and_then(|cfg| {
            let summary = run_with_workers(&cfg, args.workers)?;
            for a in &summary.artifacts {
                println!("wrote {}", a.display());
            }
            if summary.errors.is_empty() {
                Ok(())
            } else {
                Err(CliError::Runtime(summary.errors.join("; ")))
            }
        }),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("lab: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
