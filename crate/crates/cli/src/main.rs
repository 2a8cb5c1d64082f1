mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{ArgAction, Parser, Subcommand};

use crate::config::RunConfig;

#[derive(Parser)]
#[command(
    name = "duallm",
    version,
    about = "Train and evaluate ERS and Dual recurrent language models"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// Run configuration file of key=value lines.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,

    /// Override one key; repeatable, applied after the file in order.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,

    /// Output directory; takes precedence over `out_dir`.
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,

    /// Log progress to stderr (-v info, -vv debug).
    #[arg(short, long, global = true, action = ArgAction::Count)]
    verbose: u8,
}

#[derive(Subcommand, Clone, Copy, Debug)]
enum Command {
    /// Train a model and keep the checkpoint with the best validation perplexity.
    Train,
    /// Static perplexity of a checkpoint.
    Eval,
    /// Dynamic-evaluation perplexity of a checkpoint.
    Dyneval,
    /// Sweep sequence length, temperature, clipping and beta1 on validation data.
    Tune,
    /// Finite-difference gradient checks.
    Gradcheck,
    /// Number of trainable parameters of the configured model.
    Params,
    /// Train ERS and Dual variants and print a comparison table.
    Compare,
    /// Write a synthetic corpus.
    Synth,
    /// List every configuration key with its default.
    Keys,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();

    let result = RunConfig::load(cli.config.as_deref(), &cli.set)
        .map_err(commands::CliError::from)
        .and_then(|mut cfg| {
            if let Some(out) = cli.out {
                cfg.out_dir = out;
            }
            match cli.command {
                Command::Train => commands::train(&cfg),
                Command::Eval => commands::eval(&cfg, false),
                Command::Dyneval => commands::eval(&cfg, true),
                Command::Tune => commands::tune(&cfg),
                Command::Gradcheck => commands::gradcheck(&cfg),
                Command::Params => commands::params(&cfg),
                Command::Compare => commands::compare(&cfg),
                Command::Synth => commands::synth(&cfg),
                Command::Keys => commands::keys(),
            }
        });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}: {}", e.kind(), e.to_string().replace('\n', " "));
            ExitCode::FAILURE
        }
    }
}
