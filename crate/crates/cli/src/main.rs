//! `adama-lab`: experiment driver for the optimizer-accumulation
//! laboratory. Every subcommand takes a JSON config file that fully
//! determines the run; emitted artifacts embed the config hash and tool
//! version, and deterministic mode re-runs are byte-identical.

mod artifacts;
mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use artifacts::ArtifactSink;

#[derive(Parser)]
#[command(name = "adama-lab", version, about = "Optimizer-accumulation experiment driver")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Directory for emitted artifacts.
    #[arg(long, global = true, default_value = ".")]
    out_dir: PathBuf,
    /// Force fully sequential execution (dist-sim runs workers in
    /// lockstep on the calling thread).
    #[arg(long, global = true)]
    deterministic: bool,
    /// Print progress notes to stderr.
    #[arg(short, long, global = true)]
    verbose: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Single training run: TrainRecord CSV + JSON summary.
    Train {
        #[arg(long)]
        config: PathBuf,
    },
    /// Twin Adam/AdamA runs: two TrainRecords, ratio CSV, loss-gap summary.
    Compare {
        #[arg(long)]
        config: PathBuf,
    },
    /// W-worker simulation: TrainRecord CSV + communication census JSON.
    Distsim {
        #[arg(long)]
        config: PathBuf,
    },
    /// Analytic footprint tables: CSV, aligned text, JSON.
    Memcalc {
        #[arg(long)]
        config: PathBuf,
    },
    /// Online least-squares regret trace + bound report.
    Regret {
        #[arg(long)]
        config: PathBuf,
    },
    /// Inequality checkers on a recorded gradient trace.
    #[command(name = "lemma-check")]
    LemmaCheck {
        #[arg(long)]
        config: PathBuf,
    },
}

#[derive(Debug)]
pub enum CliError {
    /// Unreadable or invalid configuration (exit 2).
    Config(String),
    /// A checked invariant failed at runtime (exit 4).
    Invariant(String),
    /// Output I/O failure (exit 1).
    Io(std::io::Error),
    /// Error surfaced from the core crate (exit per classification).
    Core(adama_core::Error),
}

impl From<adama_core::Error> for CliError {
    fn from(e: adama_core::Error) -> Self {
        CliError::Core(e)
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Io(e)
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "config error: {m}"),
            CliError::Invariant(m) => write!(f, "invariant breach: {m}"),
            CliError::Io(e) => write!(f, "io error: {e}"),
            CliError::Core(e) => write!(f, "{e}"),
        }
    }
}

impl CliError {
    /// 0 success, 2 config error, 3 numeric divergence, 4 invariant
    /// breach; plain I/O failures exit 1.
    fn exit_code(&self) -> u8 {
        use adama_core::Error as E;
        match self {
            CliError::Config(_) => 2,
            CliError::Invariant(_) => 4,
            CliError::Io(_) => 1,
            CliError::Core(e) => match e {
                E::Diverged { .. } | E::NonFinite(_) => 3,
                E::ReplicaDivergence { .. } | E::Hypothesis(_) => 4,
                E::Io(_) => 1,
                _ => 2,
            },
        }
    }
}

/// Worker-thread cap from ADAMA_LAB_THREADS (unset means no cap).
fn thread_cap() -> Result<Option<usize>, CliError> {
    match std::env::var("ADAMA_LAB_THREADS") {
        Err(std::env::VarError::NotPresent) => Ok(None),
        Err(e) => Err(CliError::Config(format!("ADAMA_LAB_THREADS: {e}"))),
        Ok(v) => v
            .parse::<usize>()
            .map(Some)
            .map_err(|e| CliError::Config(format!("ADAMA_LAB_THREADS '{v}': {e}"))),
    }
}

fn run(cli: &Cli) -> Result<(), CliError> {
    let (name, config_path) = match &cli.command {
        Command::Train { config } => ("train", config),
        Command::Compare { config } => ("compare", config),
        Command::Distsim { config } => ("distsim", config),
        Command::Memcalc { config } => ("memcalc", config),
        Command::Regret { config } => ("regret", config),
        Command::LemmaCheck { config } => ("lemma-check", config),
    };

    match &cli.command {
        Command::Train { config } => {
            let (cfg, hash) = config::load::<config::TrainConfig>(config)?;
            let mut sink = ArtifactSink::new(&cli.out_dir, name, &hash)?;
            commands::cmd_train(&cfg, &mut sink)?;
            finish(cli, name, config_path, &sink);
        }
        Command::Compare { config } => {
            let (cfg, hash) = config::load::<config::CompareConfig>(config)?;
            let mut sink = ArtifactSink::new(&cli.out_dir, name, &hash)?;
            commands::cmd_compare(&cfg, &mut sink)?;
            finish(cli, name, config_path, &sink);
        }
        Command::Distsim { config } => {
            let (cfg, hash) = config::load::<config::DistsimConfig>(config)?;
            let mut sink = ArtifactSink::new(&cli.out_dir, name, &hash)?;
            commands::cmd_distsim(&cfg, &mut sink, cli.deterministic, thread_cap()?)?;
            finish(cli, name, config_path, &sink);
        }
        Command::Memcalc { config } => {
            let (cfg, hash) = config::load::<config::MemcalcConfig>(config)?;
            let mut sink = ArtifactSink::new(&cli.out_dir, name, &hash)?;
            commands::cmd_memcalc(&cfg, &mut sink)?;
            finish(cli, name, config_path, &sink);
        }
        Command::Regret { config } => {
            let (cfg, hash) = config::load::<config::RegretConfig>(config)?;
            let mut sink = ArtifactSink::new(&cli.out_dir, name, &hash)?;
            commands::cmd_regret(&cfg, &mut sink)?;
            finish(cli, name, config_path, &sink);
        }
        Command::LemmaCheck { config } => {
            let (cfg, hash) = config::load::<config::LemmaCheckConfig>(config)?;
            let mut sink = ArtifactSink::new(&cli.out_dir, name, &hash)?;
            commands::cmd_lemmacheck(&cfg, &mut sink)?;
            finish(cli, name, config_path, &sink);
        }
    }
    Ok(())
}

fn finish(cli: &Cli, name: &str, config_path: &PathBuf, sink: &ArtifactSink) {
    if cli.verbose {
        eprintln!(
            "{name} ({}) config_sha256={} wrote: {}",
            config_path.display(),
            sink.config_hash(),
            sink.written().join(", ")
        );
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("adama-lab: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
