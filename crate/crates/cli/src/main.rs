use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

mod ablate;
mod moments;
mod run;
mod spec;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Config(String),
    #[error("no such file: {}", .0.display())]
    MissingFile(PathBuf),
    #[error("{}: {}", .0.display(), .1)]
    Io(PathBuf, #[source] std::io::Error),
    #[error("training diverged at step {step} (loss {loss})")]
    Diverged { step: usize, loss: f64 },
    #[error("{0}")]
    Other(String),
}

impl From<moex::Error> for CliError {
    fn from(e: moex::Error) -> Self {
        match e {
            moex::Error::Diverged { step, loss } => CliError::Diverged { step, loss },
            moex::Error::Io(io) => CliError::Other(io.to_string()),
            e @ (moex::Error::Config(_)
            | moex::Error::Dataset { .. }
            | moex::Error::GroupMismatch { .. }
            | moex::Error::Checkpoint(_)) => CliError::Config(e.to_string()),
            e => CliError::Other(e.to_string()),
        }
    }
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) | CliError::MissingFile(_) => 2,
            CliError::Diverged { .. } => 3,
            CliError::Io(..) | CliError::Other(_) => 1,
        }
    }
}

#[derive(Parser, Debug)]
#[command(name = "moex", version, about = "Moment exchange experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train and evaluate one configuration.
    Train {
        #[command(flatten)]
        flags: spec::RunFlags,
        /// Re-run the experiment recorded in a `run.json` sidecar.
        #[arg(long)]
        replay: Option<PathBuf>,
    },
    /// Sweep a grid of exchange settings over shared seeds.
    Ablate(ablate::AblateFlags),
    /// Finite-difference check of every differentiable operation.
    Gradcheck {
        #[arg(long, default_value_t = 11)]
        seed: u64,
    },
    /// Write PONO mean/std maps of an image as P5 graymaps.
    DumpMoments(moments::DumpFlags),
    /// Write the synthetic moment-labelled dataset in CIFAR-10 binary format.
    SynthData {
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long, default_value_t = 200)]
        per_class: usize,
        #[arg(long, default_value_t = 10)]
        classes: usize,
        #[arg(long)]
        out: PathBuf,
    },
}

fn gradcheck(seed: u64) -> Result<(), CliError> {
    let rows = moex::gradcheck::full_suite(seed).map_err(CliError::from)?;
    print!("{}", moex::gradcheck::render_table(&rows));
    let failed = rows.iter().filter(|r| !r.passed()).count();
    if failed > 0 {
        return Err(CliError::Other(format!("{failed} gradient checks exceed tolerance")));
    }
    Ok(())
}

fn synth_data(seed: u64, per_class: usize, classes: usize, out: &PathBuf) -> Result<(), CliError> {
    if classes > moex::data::CIFAR10_CLASSES {
        return Err(CliError::Config(format!(
            "--classes {classes}: the binary record format stores labels 0-9"
        )));
    }
    let ds = moex::data::synth_moment_dataset(seed, per_class, classes).map_err(CliError::from)?;
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| CliError::Io(dir.to_path_buf(), e))?;
    }
    ds.data.save_binary(out).map_err(CliError::from)?;
    println!("{} images, margin {:.3}, written to {}", ds.data.len(), ds.margin, out.display());
    Ok(())
}

fn main() -> ExitCode {
    // Configuration flows through flags only; the logger ignores RUST_LOG.
    env_logger::Builder::new()
        .filter_level(log::LevelFilter::Info)
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Train { flags, replay } => run::cmd_train(flags, replay.as_deref()),
        Command::Ablate(flags) => ablate::cmd_ablate(flags),
        Command::Gradcheck { seed } => gradcheck(*seed),
        Command::DumpMoments(flags) => moments::cmd_dump_moments(flags),
        Command::SynthData {
            seed,
            per_class,
            classes,
            out,
        } => synth_data(*seed, *per_class, *classes, out),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
