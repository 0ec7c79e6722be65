//! Batch pipeline for the language-identification toolkit.
//!
//! Exit codes: 0 success, 1 validation error (bad command line, bad config,
//! missing inputs), 2 runtime failure.

mod commands;
mod config;
mod pipeline;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{CommandFactory, Parser, Subcommand};

use commands::ValidationError;

#[derive(Parser, Debug)]
#[command(
    name = "ptnlid",
    version,
    about = "Spoken language identification with phonetic temporal neural models",
    after_help = "All options live in the TOML run config; --set section.key=value overrides \
                  individual entries. Set PTN_LID_LOG=debug for verbose logging."
)]
struct Cli {
    /// Run configuration (TOML). Optional for `gradcheck`.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Override one config entry: section.key=value. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    sets: Vec<String>,

    /// Override the master seed from the config.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Worker threads for per-utterance stages.
    #[arg(long, global = true)]
    jobs: Option<usize>,

    /// Validate the configuration and inputs without side effects.
    #[arg(long, global = true)]
    dry_run: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the synthetic corpus: WAVs, manifest and phone alignments.
    Synth,
    /// Extract features for the manifest into a feature archive.
    Featurize,
    /// Train the phone-discriminative time-delay network.
    TrainPhonetic,
    /// Train a language classifier (any input mode).
    TrainLid,
    /// Produce frame- and utterance-level score tables for one condition.
    Score,
    /// Compute detection metrics, DET points and degradation rates.
    Eval,
    /// Derive noise-corrupted copies of a test set at fixed SNR levels.
    Augment,
    /// Derive fixed-duration random excerpts of a test set.
    Slice,
    /// Run the finite-difference gradient-check suite.
    Gradcheck,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter("PTN_LID_LOG")).init();

    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0u8,
                _ => 1u8,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };

    if let Some(jobs) = cli.jobs {
        if let Err(e) = rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build_global()
        {
            eprintln!("error: cannot configure {jobs} worker threads: {e}");
            return ExitCode::from(2);
        }
    }

    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<ValidationError>().is_some() {
                ExitCode::from(1)
            } else {
                ExitCode::from(2)
            }
        }
    }
}

fn run(cli: &Cli) -> anyhow::Result<()> {
    if matches!(cli.command, Command::Gradcheck) {
        return commands::gradcheck();
    }
    if cli.config.is_none() {
        // surface the clap usage text for consistency
        let mut cmd = Cli::command();
        let _ = cmd.print_help();
        return Err(anyhow::Error::new(ValidationError(
            "--config is required for this command".into(),
        )));
    }
    let cfg = config::load_config(cli.config.as_deref(), &cli.sets, cli.seed)
        .map_err(|e| anyhow::Error::new(ValidationError(e)))?;
    match cli.command {
        Command::Synth => commands::synth(&cfg, cli.dry_run),
        Command::Featurize => commands::featurize(&cfg, cli.dry_run),
        Command::TrainPhonetic => commands::train_phonetic(&cfg, cli.dry_run),
        Command::TrainLid => commands::train_lid(&cfg, cli.dry_run),
        Command::Score => commands::score(&cfg, cli.dry_run),
        Command::Eval => commands::eval(&cfg, cli.dry_run),
        Command::Augment => commands::augment(&cfg, cli.dry_run),
        Command::Slice => commands::slice(&cfg, cli.dry_run),
        Command::Gradcheck => unreachable!("handled above"),
    }
}
