//! Moment exchange (MoEx) feature augmentation for image classifiers, with the
//! small tensor and autodiff library it runs on.

pub mod augment;
pub mod autodiff;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod model;
pub mod moex;
pub mod normalization;
pub mod ops;
pub mod optim;
pub mod pgm;
pub mod tensor;
pub mod train;

pub use augment::{Image, PixelAugment, Rect};
pub use autodiff::{BatchStats, BnMode, Gradients, Graph, Var};
pub use data::{load_cifar10_binary, synth_moment_dataset, ChannelStats, ImageDataset};
pub use error::{Error, Result};
pub use model::{InsertionPoint, Mode, Params, ResNet, ResNetConfig, Variant};
pub use moex::{draw_exchange, exchange_batch, ExchangeMode, ExchangeRecord, MoExConfig};
pub use normalization::{analyze, synthesize, MomentPair, NormKind, NormScheme, NormalizedFeatures};
pub use optim::{lr_at, LrSchedule, Sgd};
pub use tensor::{Axes, Real, Shape4, Tensor4};
pub use train::{evaluate, train, LossMode, MetricsRow, TrainConfig};
