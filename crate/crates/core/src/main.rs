use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use pod_incremental::data::{generate_synthetic_dataset, SyntheticSpec};
use pod_incremental::experiment::{run_experiment, summarize};
use pod_incremental::Error;

#[derive(Parser)]
#[command(name = "podinc", version, about = "Class-incremental training with pooled-output distillation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment described by a TOML config.
    Run {
        config: PathBuf,
        /// Continue from the checkpoint in the output directory.
        #[arg(long)]
        resume: bool,
    },
    /// Write a synthetic dataset described by a TOML spec.
    Generate {
        spec: PathBuf,
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Merge the summary.json of several run directories into one CSV.
    Summarize {
        #[arg(required = true)]
        dirs: Vec<PathBuf>,
        /// Write here instead of stdout.
        #[arg(short, long)]
        out: Option<PathBuf>,
    },
}

fn generate(spec: &Path, out: &Path, seed: u64) -> Result<(), Error> {
    let text = std::fs::read_to_string(spec)
        .map_err(|e| Error::Config(format!("cannot read {}: {e}", spec.display())))?;
    let spec: SyntheticSpec = toml::from_str(&text).map_err(|e| Error::Config(e.to_string()))?;
    spec.validate().map_err(|e| Error::Config(e.to_string()))?;
    generate_synthetic_dataset(&spec, seed)?.save(out)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Run { config, resume } => run_experiment(config, *resume).map(|s| {
            let mut out = std::io::stdout().lock();
            // a closed pipe is not an error once outputs are on disk
            let _ = writeln!(
                out,
                "{} tasks  avg incremental accuracy: nme {:.2}%  cnn {:.2}%  ({:.1}s)",
                s.num_tasks,
                100.0 * s.avg_incremental_nme,
                100.0 * s.avg_incremental_cnn,
                s.wall_time_secs
            );
            let _ = writeln!(out, "outputs in {}", s.config.output_dir.display());
        }),
        Command::Generate { spec, out, seed } => generate(spec, out, *seed),
        Command::Summarize { dirs, out } => summarize(dirs).and_then(|csv| match out {
            Some(p) => pod_incremental::checkpoint::write_atomic(p, csv.as_bytes()),
            None => {
                let _ = std::io::stdout().lock().write_all(csv.as_bytes());
                Ok(())
            }
        }),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e @ Error::Config(_)) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
