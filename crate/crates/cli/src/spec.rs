//! Resolution of command-line flags into a serializable experiment spec.

use std::path::{Path, PathBuf};

use clap::{Args, ValueEnum};
use moex::augment::PixelAugment;
use moex::data::{cifar10_files, load_cifar10_binary, synth_moment_dataset, ChannelStats, ImageDataset};
use moex::model::{InsertionPoint, ResNetConfig, Variant};
use moex::moex::{ExchangeMode, MoExConfig};
use moex::normalization::{NormKind, NormScheme};
use moex::optim::LrSchedule;
use moex::train::{LossMode, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    Cifar10,
    Synth,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum VariantFlag {
    Baseline,
    MomentsOnly,
    NormalizedOnly,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum ModeFlag {
    Both,
    Mean,
    Std,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum AugFlag {
    None,
    CropFlip,
    Cutout,
    Mixup,
    Cutmix,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossFlag {
    Plain,
    Moex,
    Smooth,
    InterpOnly,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum ScheduleFlag {
    Cosine,
    Step,
}

/// Data selection.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DataSpec {
    pub source: DataSource,
    pub path: Option<PathBuf>,
    /// Training subset size; `None` keeps the whole split.
    pub subset: Option<usize>,
    pub seed: u64,
    pub synth_train_per_class: usize,
    pub synth_test_per_class: usize,
}

/// Everything needed to re-run an experiment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSpec {
    pub data: DataSpec,
    pub model: ResNetConfig,
    pub train: TrainConfig,
    /// Standardization constants frozen from the training split.
    pub stats: Option<ChannelStats>,
    pub wall_time: bool,
    pub out: PathBuf,
}

#[derive(Args, Clone, Debug)]
pub struct DataFlags {
    #[arg(long, value_enum, default_value = "cifar10")]
    pub data: DataSource,
    /// Directory holding the CIFAR-10 binary batches.
    #[arg(long)]
    pub data_path: Option<PathBuf>,
    /// Seeded training subset size (CIFAR-10).
    #[arg(long, default_value_t = 5000)]
    pub subset: usize,
    /// Use the whole training split instead of a subset.
    #[arg(long)]
    pub full: bool,
    /// Seed of the data subset and of the synthetic generator.
    #[arg(long, default_value_t = 1)]
    pub data_seed: u64,
    #[arg(long, default_value_t = 200)]
    pub synth_train: usize,
    #[arg(long, default_value_t = 50)]
    pub synth_test: usize,
}

#[derive(Args, Clone, Debug)]
pub struct RunFlags {
    #[command(flatten)]
    pub data: DataFlags,
    #[arg(long, value_enum, default_value = "baseline")]
    pub variant: VariantFlag,
    /// Residual blocks per stage (depth 6n+2).
    #[arg(long, default_value_t = 3)]
    pub blocks: usize,
    #[arg(long)]
    pub moex_scheme: Option<String>,
    #[arg(long)]
    pub moex_p: Option<f64>,
    #[arg(long)]
    pub moex_lambda: Option<f64>,
    #[arg(long, value_enum)]
    pub moex_mode: Option<ModeFlag>,
    #[arg(long)]
    pub insert: Option<String>,
    #[arg(long, value_enum, default_value = "crop-flip")]
    pub aug: AugFlag,
    #[arg(long, default_value_t = 16)]
    pub cutout_size: usize,
    #[arg(long, value_enum)]
    pub loss: Option<LossFlag>,
    #[arg(long, default_value_t = 30)]
    pub epochs: usize,
    #[arg(long, default_value_t = 128)]
    pub batch: usize,
    #[arg(long, default_value_t = 0.1)]
    pub lr: f64,
    #[arg(long, default_value_t = 0.9)]
    pub momentum: f64,
    #[arg(long, default_value_t = 5e-4)]
    pub wd: f64,
    #[arg(long, value_enum, default_value = "cosine")]
    pub schedule: ScheduleFlag,
    /// Step-schedule milestones in epochs, comma separated.
    #[arg(long, value_delimiter = ',', default_value = "15,25")]
    pub milestones: Vec<usize>,
    #[arg(long, default_value_t = 0.1)]
    pub gamma: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output directory (default `runs/latest`; on replay, the recorded one).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Record measured wall time in the metrics (breaks byte-identical reruns).
    #[arg(long)]
    pub wall_time: bool,
}

fn unit_flag(flag: &str, v: f64) -> Result<f64, CliError> {
    if (0.0..=1.0).contains(&v) {
        Ok(v)
    } else {
        Err(CliError::Config(format!("{flag} must lie in [0, 1], got {v}")))
    }
}

pub fn parse_scheme(s: &str) -> Result<NormKind, CliError> {
    s.parse()
        .map_err(|e: String| CliError::Config(format!("--moex-scheme: {e}")))
}

pub fn parse_insert(s: &str) -> Result<InsertionPoint, CliError> {
    s.parse()
        .map_err(|e: String| CliError::Config(format!("--insert: {e}")))
}

/// Exchange-related settings that can be swept.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ExchangeKnobs {
    pub loss: LossFlag,
    pub scheme: NormKind,
    pub insert: InsertionPoint,
    pub lambda: f64,
    pub p: f64,
    pub mode: ExchangeMode,
}

impl RunFlags {
    pub fn out_dir(&self) -> PathBuf {
        self.out.clone().unwrap_or_else(|| PathBuf::from("runs/latest"))
    }

    fn exchange_flag_given(&self) -> bool {
        self.moex_scheme.is_some()
            || self.moex_p.is_some()
            || self.moex_lambda.is_some()
            || self.moex_mode.is_some()
            || self.insert.is_some()
    }

    pub fn knobs(&self) -> Result<ExchangeKnobs, CliError> {
        let defaults = MoExConfig::default();
        let loss = match self.loss {
            Some(l) => l,
            None if self.exchange_flag_given() => LossFlag::Moex,
            None => LossFlag::Plain,
        };
        if loss == LossFlag::Plain && self.exchange_flag_given() {
            return Err(CliError::Config(
                "--moex-* and --insert flags require --loss moex, smooth or interp-only".into(),
            ));
        }
        Ok(ExchangeKnobs {
            loss,
            scheme: self.moex_scheme.as_deref().map(parse_scheme).transpose()?.unwrap_or(defaults.scheme.kind),
            insert: self.insert.as_deref().map(parse_insert).transpose()?.unwrap_or(defaults.insertion),
            lambda: unit_flag("--moex-lambda", self.moex_lambda.unwrap_or(defaults.lambda))?,
            p: unit_flag("--moex-p", self.moex_p.unwrap_or(defaults.p))?,
            mode: match self.moex_mode {
                None | Some(ModeFlag::Both) => ExchangeMode::Both,
                Some(ModeFlag::Mean) => ExchangeMode::MeanOnly,
                Some(ModeFlag::Std) => ExchangeMode::StdOnly,
            },
        })
    }

    /// Resolve into a spec; dataset statistics are filled in when loaded.
    pub fn resolve(&self, knobs: &ExchangeKnobs, seed: u64, out: PathBuf) -> Result<ExperimentSpec, CliError> {
        let (moex, loss) = match knobs.loss {
            LossFlag::Plain => (None, LossMode::Plain),
            LossFlag::Moex => (
                Some(MoExConfig {
                    scheme: NormScheme::new(knobs.scheme),
                    insertion: knobs.insert,
                    p: knobs.p,
                    lambda: knobs.lambda,
                    mode: knobs.mode,
                }),
                LossMode::MoexInterpolated,
            ),
            LossFlag::Smooth => (None, LossMode::LabelSmoothing { lambda: knobs.lambda }),
            LossFlag::InterpOnly => (
                None,
                LossMode::LabelInterpolationOnly {
                    lambda: knobs.lambda,
                    p: knobs.p,
                },
            ),
        };
        let variant = match (self.variant, moex.is_some()) {
            (VariantFlag::Baseline, true) => Variant::MoexHooked,
            (VariantFlag::Baseline, false) => Variant::Baseline,
            (VariantFlag::MomentsOnly, false) => Variant::MomentsOnly,
            (VariantFlag::NormalizedOnly, false) => Variant::NormalizedOnly,
            (v, true) => {
                return Err(CliError::Config(format!(
                    "--variant {} cannot be combined with moment exchange",
                    v.to_possible_value().expect("named").get_name()
                )))
            }
        };
        if knobs.loss == LossFlag::Moex {
            if let NormKind::Group(g) = knobs.scheme {
                let width = match knobs.insert {
                    InsertionPoint::AfterFirstBlock => 16,
                    InsertionPoint::BeforeStage2 => 16,
                    InsertionPoint::BeforeStage3 => 32,
                };
                if width % g != 0 {
                    return Err(CliError::Config(format!("--moex-scheme gn{g} does not divide {width} channels")));
                }
            }
        }
        let augment = match self.aug {
            AugFlag::None => PixelAugment::None,
            AugFlag::CropFlip => PixelAugment::CropFlip,
            AugFlag::Cutout => PixelAugment::Cutout { size: self.cutout_size },
            AugFlag::Mixup => PixelAugment::Mixup,
            AugFlag::Cutmix => PixelAugment::CutMix,
        };
        let schedule = match self.schedule {
            ScheduleFlag::Cosine => LrSchedule::Cosine,
            ScheduleFlag::Step => LrSchedule::Step {
                milestones: self.milestones.clone(),
                gamma: self.gamma,
            },
        };
        let spec = ExperimentSpec {
            data: DataSpec {
                source: self.data.data,
                path: self.data.data_path.clone(),
                subset: (!self.data.full).then_some(self.data.subset),
                seed: self.data.data_seed,
                synth_train_per_class: self.data.synth_train,
                synth_test_per_class: self.data.synth_test,
            },
            model: ResNetConfig {
                blocks_per_stage: self.blocks,
                variant,
                ..ResNetConfig::default()
            },
            train: TrainConfig {
                epochs: self.epochs,
                batch_size: self.batch,
                base_lr: self.lr,
                momentum: self.momentum,
                weight_decay: self.wd,
                schedule,
                seed,
                augment,
                moex,
                loss,
            },
            stats: None,
            wall_time: self.wall_time,
            out,
        };
        spec.validate()?;
        Ok(spec)
    }
}

impl ExperimentSpec {
    pub fn validate(&self) -> Result<(), CliError> {
        if self.train.batch_size < 2 && (self.train.moex.is_some() || matches!(self.train.loss, LossMode::LabelInterpolationOnly { .. })) {
            return Err(CliError::Config("--batch must be at least 2 when instances are paired".into()));
        }
        if self.train.epochs == 0 {
            return Err(CliError::Config("--epochs must be at least 1".into()));
        }
        if self.train.batch_size == 0 {
            return Err(CliError::Config("--batch must be at least 1".into()));
        }
        if !(self.train.base_lr >= 0.0 && self.train.base_lr.is_finite()) {
            return Err(CliError::Config(format!("--lr must be finite and >= 0, got {}", self.train.base_lr)));
        }
        if self.model.blocks_per_stage == 0 {
            return Err(CliError::Config("--blocks must be at least 1".into()));
        }
        self.train.validate().map_err(CliError::from)?;
        self.model.validate().map_err(CliError::from)?;
        if self.data.source == DataSource::Cifar10 && self.data.path.is_none() {
            return Err(CliError::Config("--data cifar10 needs --data-path".into()));
        }
        Ok(())
    }

    /// Load the train and test splits; freezes the standardization constants
    /// into the spec on first use.
    pub fn load_data(&mut self) -> Result<(ImageDataset, ImageDataset), CliError> {
        let (train, test) = match self.data.source {
            DataSource::Synth => {
                let per = self.data.synth_train_per_class;
                let tr = synth_moment_dataset(self.data.seed, per, 10).map_err(CliError::from)?;
                let te = synth_moment_dataset(self.data.seed.wrapping_add(1_000_003), self.data.synth_test_per_class, 10)
                    .map_err(CliError::from)?;
                (tr.data, te.data)
            }
            DataSource::Cifar10 => {
                let dir = self.data.path.clone().ok_or_else(|| CliError::Config("--data-path is required".into()))?;
                let train_files = existing(&cifar10_files(&dir, true))?;
                let test_files = existing(&cifar10_files(&dir, false))?;
                let tr = load_cifar10_binary(&train_files).map_err(CliError::from)?;
                let te = load_cifar10_binary(&test_files).map_err(CliError::from)?;
                let tr = match self.data.subset {
                    Some(n) => tr.subset(n, self.data.seed),
                    None => tr,
                };
                (tr, te)
            }
        };
        if self.stats.is_none() {
            self.stats = Some(train.channel_stats());
        }
        Ok((train, test))
    }
}

fn existing(paths: &[PathBuf]) -> Result<Vec<PathBuf>, CliError> {
    for p in paths {
        if !p.is_file() {
            return Err(CliError::MissingFile(p.clone()));
        }
    }
    Ok(paths.to_vec())
}

pub fn read_spec(path: &Path) -> Result<ExperimentSpec, CliError> {
    let text = std::fs::read_to_string(path).map_err(|_| CliError::MissingFile(path.to_path_buf()))?;
    let side: crate::run::Sidecar = serde_json::from_str(&text)
        .map_err(|e| CliError::Config(format!("{}: not a run sidecar: {e}", path.display())))?;
    Ok(side.spec)
}
