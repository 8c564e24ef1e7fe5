use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use molguide::cli::{cmd_eval, cmd_sample, cmd_train, CliError, EvalArgs, SampleArgs};
use molguide::config::SizeMode;
use molguide::diffusion::GuidanceMode;

/// Property-guided molecular graph generation with discrete diffusion.
#[derive(Parser)]
#[command(name = "molguide", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a denoiser (and node-count model) from a config file.
    Train { config: PathBuf },
    /// Sample molecules for one target property vector.
    Sample {
        checkpoint: PathBuf,
        /// Comma-separated raw property values, in checkpoint order.
        #[arg(long, value_delimiter = ',', allow_negative_numbers = true)]
        guide: Vec<f64>,
        #[arg(long, default_value_t = 10)]
        count: usize,
        #[arg(long, default_value_t = 1.0)]
        s: f64,
        #[arg(long, default_value_t = GuidanceMode::Linear)]
        mode: GuidanceMode,
        #[arg(long, default_value_t = SizeMode::Inferred)]
        size: SizeMode,
        /// Placeholder branch only; `--s` and `--mode` are ignored.
        #[arg(long)]
        unconditional: bool,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Guided-generation benchmark on the test split of a dataset.
    Eval {
        checkpoint: PathBuf,
        dataset: PathBuf,
        #[arg(long, default_value_t = 100)]
        k: usize,
        #[arg(long, default_value_t = 10)]
        r: usize,
        #[arg(long, default_value_t = 1.0)]
        s: f64,
        #[arg(long, default_value_t = GuidanceMode::Linear)]
        mode: GuidanceMode,
        #[arg(long)]
        size: Option<SizeMode>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Train { config } => {
            let summary = cmd_train(&config, |epoch, loss| eprintln!("epoch {epoch}\tloss {loss:.6}"))?;
            println!("wrote {}", summary.checkpoint.display());
        }
        Command::Sample { checkpoint, guide, count, s, mode, size, unconditional, seed, out } => {
            let records = cmd_sample(&SampleArgs {
                checkpoint,
                guide,
                count,
                s,
                mode,
                size,
                unconditional,
                seed,
                out: out.clone(),
            })?;
            let valid = records.iter().filter(|r| r.valid).count();
            println!("wrote {} samples ({valid} valid) to {}", records.len(), out.display());
        }
        Command::Eval { checkpoint, dataset, k, r, s, mode, size, seed, out } => {
            let report = cmd_eval(&EvalArgs { checkpoint, dataset, k, r, s, mode, size, seed, out })?;
            print!("{}", report.summary_text());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
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
