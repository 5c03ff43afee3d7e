//! `latentwire`: the seizure-detection pipeline from synthetic recording to
//! evaluation report, plus the edge transfer endpoints.

mod artifacts;
mod commands;
mod config;

use std::fmt;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use latentwire::eval::SplitBy;

use commands::Features;
use config::{one_line, Overrides};

/// Bad invocation, bad configuration or a missing prerequisite artifact.
#[derive(Debug)]
pub struct UsageError(String);

impl UsageError {
    pub fn new(msg: impl Into<String>) -> Self {
        UsageError(msg.into())
    }
}

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn parse_latent_dim(s: &str) -> Result<usize, String> {
    match s.parse::<usize>() {
        Ok(d) if latentwire::vae::LATENT_DIMS.contains(&d) => Ok(d),
        _ => Err(format!("expected one of {:?}", latentwire::vae::LATENT_DIMS)),
    }
}

#[derive(Parser)]
#[command(name = "latentwire", version, about = "Seizure detection from compressed EEG latents")]
struct Cli {
    /// Pipeline configuration file; relative paths inside it resolve
    /// against its directory.
    #[arg(long, global = true, default_value = "latentwire.toml")]
    config: PathBuf,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true, value_parser = parse_latent_dim)]
    latent_dim: Option<usize>,
    #[arg(long, global = true)]
    split_by: Option<SplitBy>,
    /// jetson, raspi or custom:<path>
    #[arg(long, global = true, value_parser = config::parse_profile)]
    profile: Option<String>,
    /// Repeat for more log output.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic recording and its seizure annotations.
    Synth,
    /// Window, label and transform a recording into spectrograms.
    Ingest {
        /// Recording container or CSV (default: the synthetic recording).
        #[arg(long)]
        recording: Option<PathBuf>,
        #[arg(long)]
        annotations: Option<PathBuf>,
        /// Patient id for CSV recordings (default: file stem).
        #[arg(long)]
        patient: Option<String>,
        /// Wall-clock time of the recording's first sample.
        #[arg(long, default_value = "00:00:00")]
        start: String,
    },
    /// Train the variational autoencoder on the spectrograms.
    TrainVae,
    /// Store the trained model and its encoder at reduced precision.
    Quantize,
    /// Encode every spectrogram to a latent frame file.
    Compress {
        /// Encoder or full model file (default: the quantized encoder).
        #[arg(long)]
        model: Option<PathBuf>,
    },
    /// Fit the boosted-tree classifier.
    TrainClf {
        #[arg(long, value_enum, default_value = "latent")]
        features: Features,
    },
    /// Cross-validate the classifier and write metrics and curves.
    Eval {
        #[arg(long, value_enum, default_value = "latent")]
        features: Features,
    },
    /// Classify latent frames received over TCP.
    Serve {
        /// Listen address (default: $LATENTWIRE_LISTEN, then 127.0.0.1:7878).
        #[arg(long)]
        listen: Option<String>,
    },
    /// Stream a latent file to a server.
    Send {
        /// Server address (default: $LATENTWIRE_LISTEN, then 127.0.0.1:7878).
        #[arg(long)]
        addr: Option<String>,
        #[arg(long)]
        input: Option<PathBuf>,
    },
    /// Time the edge stages and estimate energy and battery life.
    Bench {
        #[arg(long)]
        repetitions: Option<usize>,
    },
    /// Summarize reports, refusing artifacts from different configurations.
    Report {
        #[arg(long)]
        force: bool,
    },
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let overrides = Overrides {
        seed: cli.seed,
        latent_dim: cli.latent_dim,
        split_by: cli.split_by,
        profile: cli.profile,
    };
    let r = config::load(&cli.config, &overrides)?;
    let written = match cli.command {
        Command::Synth => commands::synth(&r)?,
        Command::Ingest {
            recording,
            annotations,
            patient,
            start,
        } => commands::ingest(
            &r,
            &commands::IngestArgs {
                recording,
                annotations,
                patient,
                start,
            },
        )?,
        Command::TrainVae => commands::train_vae(&r)?,
        Command::Quantize => commands::quantize(&r)?,
        Command::Compress { model } => commands::compress(&r, model)?,
        Command::TrainClf { features } => commands::train_clf(&r, features)?,
        Command::Eval { features } => commands::eval(&r, features)?,
        Command::Serve { listen } => {
            commands::serve(&r, listen.as_deref())?;
            Vec::new()
        }
        Command::Send { addr, input } => commands::send(&r, addr.as_deref(), input)?,
        Command::Bench { repetitions } => commands::bench(&r, repetitions)?,
        Command::Report { force } => commands::report(&r, force)?,
    };
    for p in written {
        println!("{}", p.display());
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    env_logger::Builder::new().filter_level(level).parse_default_env().init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let (kind, code) = if e.downcast_ref::<UsageError>().is_some() {
                ("usage", 2)
            } else {
                ("runtime", 1)
            };
            eprintln!("latentwire: error[{kind}]: {}", one_line(&format!("{e:#}")));
            ExitCode::from(code)
        }
    }
}
