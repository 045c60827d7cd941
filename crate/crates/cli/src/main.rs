use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use minivlm_cli::commands;

/// Train, evaluate and query small vision-language models.
///
/// Log verbosity follows the MINIVLM_LOG environment variable
/// (error, warn, info, debug, trace; default info).
#[derive(Parser)]
#[command(name = "minivlm", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run every stage of the configured recipe, then the configured evals.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        workdir: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Score a checkpoint on a benchmark file.
    Eval {
        #[arg(long)]
        config: PathBuf,
        /// Checkpoint directory; repeat to load several in order.
        #[arg(long, required = true)]
        checkpoint: Vec<PathBuf>,
        #[arg(long)]
        benchmark: PathBuf,
        #[arg(long)]
        workdir: Option<PathBuf>,
        #[arg(long, default_value_t = minivlm::eval::DEFAULT_MAX_NEW_TOKENS)]
        max_new_tokens: usize,
    },
    /// Answer one prompt greedily.
    Generate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, required = true)]
        checkpoint: Vec<PathBuf>,
        #[arg(long)]
        prompt: String,
        #[arg(long)]
        image: Option<PathBuf>,
        #[arg(long, default_value_t = minivlm::eval::DEFAULT_MAX_NEW_TOKENS)]
        max_new_tokens: usize,
    },
    /// List registered component names per kind.
    Components {
        #[arg(default_value = "list", value_parser = ["list"])]
        action: String,
    },
    /// Write a synthetic train/held-out dataset.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 200)]
        heldout_n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("MINIVLM_LOG", "info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    let result = match cli.command {
        Command::Train { config, workdir, seed } => {
            commands::train(&config, workdir.as_deref(), seed).map(drop)
        }
        Command::Eval {
            config,
            checkpoint,
            benchmark,
            workdir,
            max_new_tokens,
        } => commands::eval(&config, &checkpoint, &benchmark, workdir.as_deref(), max_new_tokens).map(drop),
        Command::Generate {
            config,
            checkpoint,
            prompt,
            image,
            max_new_tokens,
        } => commands::generate(&config, &checkpoint, &prompt, image.as_deref(), max_new_tokens).map(drop),
        Command::Components { .. } => commands::components(),
        Command::Synth { out, n, heldout_n, seed } => commands::synth(&out, n, heldout_n, seed),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
