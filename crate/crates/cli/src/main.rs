use clap::{Parser, Subcommand};
use std::path::PathBuf;
use std::process::ExitCode;
use vpflow_cli::{run, RunOptions};

#[derive(Parser)]
#[command(name = "vpflow", version, about = "Probability-flow transport experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the experiment described by a JSON config.
    Run {
        config: PathBuf,
        /// Worker threads for grid and Monte Carlo parallelism.
        #[arg(long, env = "VPFLOW_THREADS")]
        threads: Option<usize>,
        /// Output directory (overrides `output_dir`).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Base seed (overrides `seed`).
        #[arg(long)]
        seed: Option<u64>,
    },
}

fn main() -> ExitCode {
    let Command::Run { config, threads, out, seed } = Cli::parse().command;
    if let Some(n) = threads.filter(|n| *n > 0) {
        // only fails if a pool already exists, which cannot happen this early
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    match run(&config, &RunOptions { out, seed, threads }) {
        Ok(summary) => {
            println!("{}", serde_json::json!({"status": "ok", "out": summary.out_dir.display().to_string()}));
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("{}", e.to_json());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
