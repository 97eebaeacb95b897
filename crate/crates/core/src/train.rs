//! Deterministic mini-batch training and evaluation.

use std::fmt::Write as _;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::augment::PixelAugment;
use crate::autodiff::{Graph, Var};
use crate::data::{assemble, epoch_order, sequential_batches, Batch, ChannelStats, ImageDataset};
use crate::error::{Error, Result};
use crate::model::{Mode, Params, ResNet};
use crate::moex::{draw_exchange, interpolated_loss_in_graph, ExchangeRecord, MoExConfig};
use crate::optim::{lr_at, LrSchedule, Sgd};
use crate::tensor::{Real, Tensor4};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossMode {
    Plain,
    /// `lambda * CE(y_A) + (1 - lambda) * CE(y_B)` on exchanged batches.
    MoexInterpolated,
    /// Mass `lambda` on the target, the rest spread over the other classes.
    LabelSmoothing { lambda: f64 },
    /// Pair labels through a random permutation, gated by `p`, without
    /// touching the features.
    LabelInterpolationOnly { lambda: f64, p: f64 },
}

/// Independent rng streams derived from the experiment seed.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stream {
    Init = 0,
    Shuffle = 1,
    Augment = 2,
    Exchange = 3,
}

pub fn stream_rng(seed: u64, stream: Stream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream as u64);
    rng
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub schedule: LrSchedule,
    pub seed: u64,
    pub augment: PixelAugment,
    pub moex: Option<MoExConfig>,
    pub loss: LossMode,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            batch_size: 128,
            base_lr: 0.1,
            momentum: 0.9,
            weight_decay: 5e-4,
            schedule: LrSchedule::Cosine,
            seed: 0,
            augment: PixelAugment::CropFlip,
            moex: None,
            loss: LossMode::Plain,
        }
    }
}

fn check_unit(name: &str, v: f64) -> Result<()> {
    if (0.0..=1.0).contains(&v) {
        Ok(())
    } else {
        Err(Error::Config(format!("{name} must lie in [0, 1], got {v}")))
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        if !(self.base_lr >= 0.0 && self.base_lr.is_finite()) {
            return Err(Error::Config(format!("learning rate must be finite and >= 0, got {}", self.base_lr)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("momentum must lie in [0, 1), got {}", self.momentum)));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::Config(format!("weight decay must be >= 0, got {}", self.weight_decay)));
        }
        match (&self.moex, self.loss) {
            (Some(m), LossMode::MoexInterpolated) => m.validate()?,
            (None, LossMode::MoexInterpolated) => {
                return Err(Error::Config("loss mode moex_interpolated needs a moex configuration".into()))
            }
            (Some(_), _) => {
                return Err(Error::Config(
                    "a moex configuration requires loss mode moex_interpolated".into(),
                ))
            }
            (None, LossMode::LabelSmoothing { lambda }) => check_unit("label smoothing lambda", lambda)?,
            (None, LossMode::LabelInterpolationOnly { lambda, p }) => {
                check_unit("interpolation lambda", lambda)?;
                check_unit("interpolation p", p)?;
            }
            (None, LossMode::Plain) => {}
        }
        if self.pairs_instances() && self.batch_size < 2 {
            return Err(Error::Config("batch size must be at least 2 when instances are paired".into()));
        }
        Ok(())
    }

    fn pairs_instances(&self) -> bool {
        self.moex.is_some() || matches!(self.loss, LossMode::LabelInterpolationOnly { .. })
    }
}

/// One line of the metrics CSV.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_err: f64,
    pub test_err: f64,
    pub lr: f64,
    pub wall_time_s: f64,
    pub seed: u64,
}

pub const CSV_HEADER: &str = "epoch,train_loss,train_err,test_err,lr,wall_time_s,seed";

impl MetricsRow {
    pub fn csv_line(&self) -> String {
        format!(
            "{},{:.6},{:.4},{:.4},{:.8},{:.3},{}",
            self.epoch, self.train_loss, self.train_err, self.test_err, self.lr, self.wall_time_s, self.seed
        )
    }

    pub fn parse_csv_line(line: &str) -> Result<Self> {
        let f: Vec<&str> = line.trim().split(',').collect();
        if f.len() != 7 {
            return Err(Error::Config(format!("metrics row has {} fields: `{line}`", f.len())));
        }
        let bad = |what: &str| Error::Config(format!("unparseable {what} in metrics row `{line}`"));
        let num = |i: usize, what: &str| f[i].parse::<f64>().map_err(|_| bad(what));
        Ok(MetricsRow {
            epoch: f[0].parse().map_err(|_| bad("epoch"))?,
            train_loss: num(1, "train_loss")?,
            train_err: num(2, "train_err")?,
            test_err: num(3, "test_err")?,
            lr: num(4, "lr")?,
            wall_time_s: num(5, "wall_time_s")?,
            seed: f[6].parse().map_err(|_| bad("seed"))?,
        })
    }
}

pub fn metrics_csv(rows: &[MetricsRow]) -> String {
    let mut s = String::from(CSV_HEADER);
    s.push('\n');
    for r in rows {
        let _ = writeln!(s, "{}", r.csv_line());
    }
    s
}

/// Exchange draw of one training step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RngLogEntry {
    pub step: usize,
    pub applied: bool,
    pub perm: Vec<usize>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome<T> {
    pub params: Params<T>,
    pub history: Vec<MetricsRow>,
    pub rng_log: Vec<RngLogEntry>,
}

/// Data handed to [`train`].
pub struct TrainData<'a> {
    pub train: &'a ImageDataset,
    pub test: &'a ImageDataset,
    pub stats: ChannelStats,
}

/// Knobs that do not affect the numbers.
#[derive(Clone, Copy, Debug, Default)]
pub struct RunOptions {
    /// Record measured wall time instead of 0 in the metrics.
    pub wall_time: bool,
}

/// Loss node for a batch given its (possibly pixel-mixed) target rows.
pub fn loss_in_graph<T: Real>(
    g: &mut Graph<T>,
    logits: Var,
    targets: &Tensor4<T>,
    mode: LossMode,
    record: Option<&ExchangeRecord>,
) -> Result<Var> {
    match (mode, record) {
        (LossMode::MoexInterpolated | LossMode::LabelInterpolationOnly { .. }, Some(rec)) if rec.applied => {
            let donor = rec.donor_targets(targets)?;
            interpolated_loss_in_graph(g, logits, targets, &donor, rec.lambda)
        }
        (LossMode::LabelSmoothing { lambda }, _) => {
            let k = targets.shape().c;
            if k < 2 {
                return Err(Error::invalid("label smoothing", "needs at least 2 classes"));
            }
            let on = T::lit(lambda);
            let off = T::lit((1.0 - lambda) / (k - 1) as f64);
            let smoothed = targets.map(|t| on * t + off * (T::one() - t));
            g.softmax_cross_entropy(logits, &smoothed)
        }
        _ => g.softmax_cross_entropy(logits, targets),
    }
}

/// Result of one optimisation step.
pub struct StepOutcome<T> {
    pub loss: T,
    pub logits: Tensor4<T>,
    pub grads: Vec<Option<Tensor4<T>>>,
}

/// Forward, loss and backward for one assembled batch, without updating.
/// Training-mode batch statistics are folded into the running averages.
pub fn compute_step<T: Real>(
    net: &ResNet,
    params: &mut Params<T>,
    x: &Tensor4<T>,
    targets: &Tensor4<T>,
    loss: LossMode,
    moex: Option<&MoExConfig>,
    record: Option<&ExchangeRecord>,
) -> Result<StepOutcome<T>> {
    let mut g = Graph::new();
    let vars = params.register(&mut g);
    let xv = g.constant(x.clone());
    let exchange = match (moex, record) {
        (Some(cfg), Some(rec)) => Some((cfg, rec)),
        _ => None,
    };
    let out = net.forward_in_graph(&mut g, params, &vars, xv, Mode::Train, exchange)?;
    let root = loss_in_graph(&mut g, out.logits, targets, loss, record)?;
    let loss_value = g.value(root).item();
    let logits = g.value(out.logits).clone();
    let mut grads = g.backward(root)?;
    params.apply_batch_stats(out.batch_stats, net.cfg.bn_momentum);
    Ok(StepOutcome {
        loss: loss_value,
        logits,
        grads: vars.iter().map(|&v| grads.take(v)).collect(),
    })
}

fn argmax<T: Real>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Number of rows whose arg-max differs from the label (first maximum wins).
pub fn count_errors<T: Real>(logits: &Tensor4<T>, labels: &[usize]) -> usize {
    let k = logits.shape().c;
    logits
        .data()
        .chunks(k)
        .zip(labels)
        .filter(|(row, &y)| argmax(row) != y)
        .count()
}

/// Top-1 error percentage.
pub fn error_rate<T: Real>(logits: &Tensor4<T>, labels: &[usize]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    100.0 * count_errors(logits, labels) as f64 / labels.len() as f64
}

/// Eval-mode top-1 error of the network on `data`.
pub fn evaluate<T: Real>(
    net: &ResNet,
    params: &Params<T>,
    data: &ImageDataset,
    stats: &ChannelStats,
    batch_size: usize,
) -> Result<f64> {
    if data.is_empty() {
        return Ok(0.0);
    }
    let mut wrong = 0;
    for batch in sequential_batches::<T>(data, batch_size, stats) {
        let logits = net.predict(params, &batch.x)?;
        wrong += count_errors(&logits, &batch.labels);
    }
    Ok(100.0 * wrong as f64 / data.len() as f64)
}

fn draw_pairing(cfg: &TrainConfig, rng: &mut ChaCha8Rng, n: usize) -> Option<ExchangeRecord> {
    match (&cfg.moex, cfg.loss) {
        (Some(m), _) => Some(draw_exchange(rng, n, m)),
        (None, LossMode::LabelInterpolationOnly { lambda, p }) => {
            let gate = MoExConfig {
                p,
                lambda,
                ..MoExConfig::default()
            };
            Some(draw_exchange(rng, n, &gate))
        }
        _ => None,
    }
}

/// Train from freshly initialised parameters. Per step: pixel augmentation,
/// forward with the optional exchange, loss, backward, SGD update.
pub fn train<T: Real>(cfg: &TrainConfig, net: &ResNet, data: &TrainData<'_>, opts: RunOptions) -> Result<TrainOutcome<T>> {
    let params = net.init_params::<T, _>(&mut stream_rng(cfg.seed, Stream::Init));
    train_from(cfg, net, data, params, opts)
}

pub fn train_from<T: Real>(
    cfg: &TrainConfig,
    net: &ResNet,
    data: &TrainData<'_>,
    mut params: Params<T>,
    opts: RunOptions,
) -> Result<TrainOutcome<T>> {
    cfg.validate()?;
    if data.train.is_empty() {
        return Err(Error::Config("training set is empty".into()));
    }
    if data.train.classes() != net.cfg.classes {
        return Err(Error::Config(format!(
            "dataset has {} classes, network {}",
            data.train.classes(),
            net.cfg.classes
        )));
    }
    let exchange_cfg = cfg.moex.as_ref();
    if exchange_cfg.is_some() && net.cfg.variant != crate::model::Variant::MoexHooked {
        return Err(Error::Config(format!("moment exchange is not defined for the {:?} network", net.cfg.variant)));
    }
    let mut shuffle_rng = stream_rng(cfg.seed, Stream::Shuffle);
    let mut aug_rng = stream_rng(cfg.seed, Stream::Augment);
    let mut pair_rng = stream_rng(cfg.seed, Stream::Exchange);

    let steps_per_epoch = data.train.len().div_ceil(cfg.batch_size);
    let total_steps = steps_per_epoch * cfg.epochs;
    let schedule = match &cfg.schedule {
        LrSchedule::Step { milestones, gamma } => LrSchedule::Step {
            milestones: milestones.iter().map(|&e| e * steps_per_epoch).collect(),
            gamma: *gamma,
        },
        other => other.clone(),
    };
    let mut sgd = Sgd::new(&params, cfg.momentum, cfg.weight_decay);
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut rng_log = Vec::new();
    let start = Instant::now();
    let mut step = 0usize;

    for epoch in 1..=cfg.epochs {
        let epoch_lr = lr_at(&schedule, cfg.base_lr, step, total_steps);
        let order = epoch_order(data.train.len(), &mut shuffle_rng);
        let (mut loss_sum, mut wrong, mut seen) = (0.0f64, 0usize, 0usize);
        for idx in order.chunks(cfg.batch_size) {
            let Batch { mut x, y: mut targets, labels, .. } =
                assemble::<T>(data.train, idx, &data.stats, |img| cfg.augment.apply_u8(&img, &mut aug_rng));
            cfg.augment.apply_batch(&mut x, &mut targets, &mut aug_rng)?;
            let record = draw_pairing(cfg, &mut pair_rng, idx.len());
            if let Some(rec) = &record {
                rng_log.push(RngLogEntry {
                    step,
                    applied: rec.applied,
                    perm: rec.perm.clone(),
                });
            }
            let out = compute_step(net, &mut params, &x, &targets, cfg.loss, exchange_cfg, record.as_ref())?;
            let loss = out.loss.as_f64();
            if !loss.is_finite() {
                return Err(Error::Diverged { step, loss });
            }
            let lr = lr_at(&schedule, cfg.base_lr, step, total_steps);
            sgd.step(&mut params, &out.grads, lr)?;
            loss_sum += loss * idx.len() as f64;
            wrong += count_errors(&out.logits, &labels);
            seen += idx.len();
            step += 1;
        }
        let test_err = evaluate(net, &params, data.test, &data.stats, cfg.batch_size.max(64))?;
        let row = MetricsRow {
            epoch,
            train_loss: loss_sum / seen as f64,
            train_err: 100.0 * wrong as f64 / seen as f64,
            test_err,
            lr: epoch_lr,
            wall_time_s: if opts.wall_time { start.elapsed().as_secs_f64() } else { 0.0 },
            seed: cfg.seed,
        };
        log::info!(
            "epoch {epoch}/{}: loss {:.4} train_err {:.2} test_err {:.2}",
            cfg.epochs,
            row.train_loss,
            row.train_err,
            row.test_err
        );
        history.push(row);
    }
    Ok(TrainOutcome {
        params,
        history,
        rng_log,
    })
}
