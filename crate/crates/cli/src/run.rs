//! `train`: one experiment, writing metrics, sidecar and checkpoint.

use std::fs;
use std::path::Path;

use moex::checkpoint::save_checkpoint;
use moex::model::ResNet;
use moex::train::{metrics_csv, train, MetricsRow, RngLogEntry, RunOptions, TrainData};
use serde::{Deserialize, Serialize};

use crate::spec::{read_spec, ExperimentSpec, RunFlags};
use crate::CliError;

pub const METRICS_FILE: &str = "metrics.csv";
pub const SIDECAR_FILE: &str = "run.json";
pub const CHECKPOINT_FILE: &str = "model.ckpt";

/// JSON written next to the metrics.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Sidecar {
    pub spec: ExperimentSpec,
    pub final_test_err: Option<f64>,
    pub rng_streams: RngStreams,
    pub rng_log: Vec<RngLogEntry>,
}

/// How the experiment seed is split into generator streams.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RngStreams {
    pub generator: String,
    pub init: u64,
    pub shuffle: u64,
    pub augment: u64,
    pub exchange: u64,
}

impl Default for RngStreams {
    fn default() -> Self {
        use moex::train::Stream;
        RngStreams {
            generator: "ChaCha8, seed_from_u64(seed), set_stream(k)".into(),
            init: Stream::Init as u64,
            shuffle: Stream::Shuffle as u64,
            augment: Stream::Augment as u64,
            exchange: Stream::Exchange as u64,
        }
    }
}

pub struct RunResult {
    pub history: Vec<MetricsRow>,
}

/// Train and evaluate according to `spec`, writing all outputs to `spec.out`.
pub fn run_experiment(mut spec: ExperimentSpec) -> Result<RunResult, CliError> {
    spec.validate()?;
    let (train_set, test_set) = spec.load_data()?;
    let stats = spec.stats.expect("filled by load_data");
    let net = ResNet::new(spec.model).map_err(CliError::from)?;
    let data = TrainData {
        train: &train_set,
        test: &test_set,
        stats,
    };
    log::info!(
        "training {:?} (depth {}) on {} images, testing on {}",
        spec.model.variant,
        spec.model.depth(),
        train_set.len(),
        test_set.len()
    );
    let outcome = train::<f32>(&spec.train, &net, &data, RunOptions { wall_time: spec.wall_time }).map_err(CliError::from)?;
    let out = spec.out.clone();
    fs::create_dir_all(&out).map_err(|e| CliError::Io(out.clone(), e))?;
    write_file(&out.join(METRICS_FILE), metrics_csv(&outcome.history).as_bytes())?;
    let side = Sidecar {
        final_test_err: outcome.history.last().map(|r| r.test_err),
        spec: spec.clone(),
        rng_streams: RngStreams::default(),
        rng_log: outcome.rng_log,
    };
    let json = serde_json::to_string_pretty(&side).map_err(|e| CliError::Other(e.to_string()))?;
    write_file(&out.join(SIDECAR_FILE), json.as_bytes())?;
    let meta = serde_json::to_string(&CheckpointMeta {
        model: spec.model,
        stats,
    })
    .map_err(|e| CliError::Other(e.to_string()))?;
    save_checkpoint(out.join(CHECKPOINT_FILE), &outcome.params, &meta).map_err(CliError::from)?;
    Ok(RunResult {
        history: outcome.history,
    })
}

/// Metadata stored inside checkpoints written by `train`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub model: moex::ResNetConfig,
    pub stats: moex::ChannelStats,
}

pub fn write_file(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    fs::write(path, bytes).map_err(|e| CliError::Io(path.to_path_buf(), e))
}

pub fn cmd_train(flags: &RunFlags, replay: Option<&Path>) -> Result<(), CliError> {
    let spec = match replay {
        Some(path) => {
            let mut spec = read_spec(path)?;
            if let Some(out) = &flags.out {
                spec.out = out.clone();
            }
            spec
        }
        None => {
            let knobs = flags.knobs()?;
            flags.resolve(&knobs, flags.seed, flags.out_dir())?
        }
    };
    let out_dir = spec.out.clone();
    let result = run_experiment(spec)?;
    if let Some(last) = result.history.last() {
        println!(
            "final test_err {:.2}% after {} epochs; outputs in {}",
            last.test_err,
            last.epoch,
            out_dir.display()
        );
    }
    Ok(())
}
