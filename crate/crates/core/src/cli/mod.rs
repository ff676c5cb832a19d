//! Command-line front end: run configuration, pipeline subcommands, manifests
//! and image grids.

mod commands;
mod config;
mod grid;
mod manifest;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Parser, Subcommand};

pub use commands::{
    cmd_eval, cmd_inspect, cmd_pack, cmd_sample, cmd_train, default_checkpoint, load_classifiers, load_dataset,
    PackOutcome, RunPaths, TrainOutcome,
};
pub use config::{
    DataSection, DataSource, EvalSection, ModelSection, RunConfig, SampleMode, SampleRun, SampleSection, TrainSection,
    OUTPUT_ROOT_ENV,
};
pub use grid::{encode_grid, write_grid};
pub use manifest::{sha256_file, RunManifest, RunStatus, MANIFEST_FILE};

use crate::error::Error;

pub const EXIT_OK: i32 = 0;
pub const EXIT_RUNTIME: i32 = 1;
pub const EXIT_INPUT: i32 = 2;

#[derive(Parser, Debug)]
#[command(name = "chandiff", version, about = "Channel-wise image-guided multimodal diffusion")]
struct Cli {
    /// Run configuration (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Take the resolved configuration from a prior stage's manifest.
    #[arg(long, global = true, conflicts_with = "config")]
    manifest: Option<PathBuf>,
    /// Override a configuration value, e.g. `--set train.epochs=3`.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Build the paired corpus and cache it as a packed dataset.
    Pack,
    /// Train the per-modality classifiers and the denoiser.
    Train {
        /// Continue from this training checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Generate samples and image grids.
    Sample {
        /// Defaults to the final-epoch checkpoint.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Run a single mode instead of the configured runs.
        #[arg(long, value_enum)]
        mode: Option<ModeArg>,
        /// Conditioning modality for guided modes.
        #[arg(long)]
        guide: Option<String>,
        /// Samples per run.
        #[arg(long)]
        count: Option<usize>,
        /// Repeat one dataset sample as every condition.
        #[arg(long)]
        condition_index: Option<usize>,
    },
    /// Score the sample dumps and write the metric report.
    Eval,
    /// Pack, train, sample and evaluate in sequence.
    Run,
    /// Summarise a container file or manifest.
    Inspect {
        path: PathBuf,
        /// Recompute and check every digest recorded in a manifest.
        #[arg(long)]
        verify: bool,
    },
}

#[derive(clap::ValueEnum, Clone, Copy, Debug)]
enum ModeArg {
    Joint,
    Random,
    Predicted,
    Constant,
}

impl From<ModeArg> for SampleMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Joint => SampleMode::Joint,
            ModeArg::Random => SampleMode::Random,
            ModeArg::Predicted => SampleMode::Predicted,
            ModeArg::Constant => SampleMode::Constant,
        }
    }
}

/// Exit code for an error: configuration and input problems are 2, anything
/// that fails while running is 1.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_)
        | Error::InvalidArgument(_)
        | Error::Format { .. }
        | Error::Truncated { .. }
        | Error::Data(_) => EXIT_INPUT,
        Error::Io { source, .. } if source.kind() == std::io::ErrorKind::NotFound => EXIT_INPUT,
        _ => EXIT_RUNTIME,
    }
}

fn load_config(cli: &Cli) -> crate::Result<RunConfig> {
    match (&cli.config, &cli.manifest) {
        (Some(p), _) => RunConfig::load(p, &cli.overrides),
        (None, Some(m)) => RunConfig::from_toml(&RunManifest::read(m)?.config, &cli.overrides),
        (None, None) => RunConfig::from_toml("", &cli.overrides),
    }
}

fn execute(cli: Cli) -> crate::Result<()> {
    if let Command::Inspect { path, verify } = &cli.command {
        print!("{}", cmd_inspect(path, *verify)?);
        return Ok(());
    }
    let mut cfg = load_config(&cli)?;
    match cli.command {
        Command::Pack => {
            let out = cmd_pack(&cfg)?;
            println!("packed {} samples, sha256 {}", out.samples, out.digest);
        }
        Command::Train { resume } => {
            let out = cmd_train(&cfg, resume.as_deref())?;
            println!("trained {} steps, final loss {:.6}, checkpoint {}", out.steps, out.final_loss, out.final_checkpoint.display());
        }
        Command::Sample { checkpoint, mode, guide, count, condition_index } => {
            if let Some(n) = count {
                cfg.sample.count = n;
            }
            if condition_index.is_some() {
                cfg.sample.condition_index = condition_index;
            }
            let single = match (mode, guide) {
                (Some(m), guide) => Some(vec![SampleRun { mode: m.into(), guide }]),
                (None, Some(_)) => return Err(Error::Config("--guide requires --mode".into())),
                (None, None) => None,
            };
            if let Some(runs) = &single {
                let mut probe = cfg.clone();
                probe.sample.runs = runs.clone();
                probe.validate()?;
            }
            for p in cmd_sample(&cfg, checkpoint.as_deref(), single.as_deref())? {
                println!("wrote {}", p.display());
            }
        }
        Command::Eval => print!("{}", cmd_eval(&cfg)?.to_text()),
        Command::Run => {
            let p = cmd_pack(&cfg)?;
            println!("packed {} samples, sha256 {}", p.samples, p.digest);
            let t = cmd_train(&cfg, None)?;
            println!("trained {} steps, final loss {:.6}", t.steps, t.final_loss);
            cmd_sample(&cfg, None, None)?;
            print!("{}", cmd_eval(&cfg)?.to_text());
        }
        Command::Inspect { .. } => unreachable!(),
    }
    Ok(())
}

/// Parse arguments, run, and return the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_INPUT } else { EXIT_OK };
        }
    };
    match execute(cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}
