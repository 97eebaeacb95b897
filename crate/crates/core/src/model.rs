//! Three-stage residual classifier (`6n + 2` layers) with a single moment
//! exchange hook and the feature-ablation variants.
//!
//! Layout: stem `conv3x3 -> BN -> ReLU`, three stages of `n` basic blocks with
//! widths `widths[0..3]` (the first block of stages 2 and 3 downsamples by 2,
//! projection shortcuts are `conv1x1 -> BN`), global average pooling and an
//! affine classifier.

use std::collections::HashMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{BatchStats, BnMode, Graph, Var};
use crate::error::{Error, Result};
use crate::moex::{draw_exchange, exchange_in_graph, ExchangeRecord, MoExConfig};
use crate::normalization::{analyze_in_graph, moment_feature_map_in_graph, NormKind, NormScheme};
use crate::tensor::{Real, Shape4, Tensor4};

/// Where the exchange is applied.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InsertionPoint {
    /// Right after the stem `Conv-BN-ReLU` block, before stage 1.
    #[default]
    AfterFirstBlock,
    BeforeStage2,
    BeforeStage3,
}

impl std::str::FromStr for InsertionPoint {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "stem" => Ok(InsertionPoint::AfterFirstBlock),
            "stage2" => Ok(InsertionPoint::BeforeStage2),
            "stage3" => Ok(InsertionPoint::BeforeStage3),
            _ => Err(format!("unknown insertion point `{s}` (expected stem, stage2 or stage3)")),
        }
    }
}

impl std::fmt::Display for InsertionPoint {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            InsertionPoint::AfterFirstBlock => "stem",
            InsertionPoint::BeforeStage2 => "stage2",
            InsertionPoint::BeforeStage3 => "stage3",
        })
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    #[default]
    Baseline,
    /// Stages see only the 2-channel PONO (mean, std) map of the stem output.
    MomentsOnly,
    /// Stages see the PONO-normalized stem output, moments discarded.
    NormalizedOnly,
    /// Baseline network that accepts a moment exchange during training.
    MoexHooked,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResNetConfig {
    pub blocks_per_stage: usize,
    pub widths: [usize; 3],
    pub in_channels: usize,
    pub classes: usize,
    pub variant: Variant,
    pub bn_eps: f64,
    pub bn_momentum: f64,
    /// `eps` of the PONO decomposition used by the feature-ablation variants.
    pub moment_eps: f64,
}

impl Default for ResNetConfig {
    fn default() -> Self {
        ResNetConfig {
            blocks_per_stage: 3,
            widths: [16, 32, 64],
            in_channels: 3,
            classes: 10,
            variant: Variant::Baseline,
            bn_eps: 1e-5,
            bn_momentum: 0.1,
            moment_eps: crate::normalization::DEFAULT_EPS,
        }
    }
}

impl ResNetConfig {
    pub fn depth(&self) -> usize {
        6 * self.blocks_per_stage + 2
    }

    pub fn validate(&self) -> Result<()> {
        if self.blocks_per_stage == 0 {
            return Err(Error::Config("blocks_per_stage must be at least 1".into()));
        }
        if self.widths.contains(&0) || self.in_channels == 0 {
            return Err(Error::Config("layer widths must be positive".into()));
        }
        if self.classes < 2 {
            return Err(Error::Config(format!("need at least 2 classes, got {}", self.classes)));
        }
        if !(0.0..=1.0).contains(&self.bn_momentum) {
            return Err(Error::Config(format!("bn momentum {} outside [0, 1]", self.bn_momentum)));
        }
        Ok(())
    }

    fn stage1_input(&self) -> usize {
        match self.variant {
            Variant::MomentsOnly => 2,
            _ => self.widths[0],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamRole {
    ConvWeight,
    BnGamma,
    BnBeta,
    FcWeight,
    FcBias,
}

impl ParamRole {
    /// Weight decay is not applied to batch norm affine parameters.
    pub fn decays(&self) -> bool {
        !matches!(self, ParamRole::BnGamma | ParamRole::BnBeta)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param<T> {
    pub name: String,
    pub role: ParamRole,
    pub value: Tensor4<T>,
}

/// Exponential moving averages of batch norm statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
    pub updates: u64,
}

impl<T: Real> RunningStats<T> {
    pub fn new(channels: usize) -> Self {
        RunningStats {
            mean: vec![T::zero(); channels],
            var: vec![T::one(); channels],
            updates: 0,
        }
    }

    /// `running <- (1 - m) running + m batch`, the variance term using the
    /// unbiased batch estimate.
    pub fn update(&mut self, batch: &BatchStats<T>, momentum: f64) {
        let m = T::lit(momentum);
        let keep = T::one() - m;
        let count = batch.count as f64;
        let unbias = T::lit(if batch.count > 1 { count / (count - 1.0) } else { 1.0 });
        for (r, &b) in self.mean.iter_mut().zip(&batch.mean) {
            *r = keep * *r + m * b;
        }
        for (r, &b) in self.var.iter_mut().zip(&batch.var) {
            *r = keep * *r + m * b * unbias;
        }
        self.updates += 1;
    }
}

/// Trainable parameters plus batch norm buffers.
#[derive(Clone, Debug, PartialEq)]
pub struct Params<T> {
    pub params: Vec<Param<T>>,
    pub running: Vec<(String, RunningStats<T>)>,
    index: HashMap<String, usize>,
    running_index: HashMap<String, usize>,
}

impl<T: Real> Default for Params<T> {
    fn default() -> Self {
        Params {
            params: Vec::new(),
            running: Vec::new(),
            index: HashMap::new(),
            running_index: HashMap::new(),
        }
    }
}

impl<T: Real> Params<T> {
    pub fn push(&mut self, name: impl Into<String>, role: ParamRole, value: Tensor4<T>) {
        let name = name.into();
        self.index.insert(name.clone(), self.params.len());
        self.params.push(Param { name, role, value });
    }

    pub fn push_running(&mut self, name: impl Into<String>, stats: RunningStats<T>) {
        let name = name.into();
        self.running_index.insert(name.clone(), self.running.len());
        self.running.push((name, stats));
    }

    pub fn get(&self, name: &str) -> Option<&Param<T>> {
        self.index.get(name).map(|&i| &self.params[i])
    }

    pub fn position(&self, name: &str) -> Result<usize> {
        self.index
            .get(name)
            .copied()
            .ok_or_else(|| Error::Checkpoint(format!("missing parameter `{name}`")))
    }

    pub fn running(&self, name: &str) -> Option<&RunningStats<T>> {
        self.running_index.get(name).map(|&i| &self.running[i].1)
    }

    fn running_position(&self, name: &str) -> Result<usize> {
        self.running_index
            .get(name)
            .copied()
            .ok_or_else(|| Error::Checkpoint(format!("missing batch norm statistics `{name}`")))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn scalar_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Register every parameter as a trainable leaf of `g`, in order.
    pub fn register(&self, g: &mut Graph<T>) -> Vec<Var> {
        self.params.iter().map(|p| g.param(p.value.clone())).collect()
    }

    /// Fold observed batch statistics into the running averages.
    pub fn apply_batch_stats(&mut self, observed: Vec<(usize, BatchStats<T>)>, momentum: f64) {
        for (i, s) in observed {
            self.running[i].1.update(&s, momentum);
        }
    }

    pub fn cast<U: Real>(&self) -> Params<U> {
        let mut out = Params::default();
        for p in &self.params {
            out.push(p.name.clone(), p.role, p.value.cast());
        }
        for (name, r) in &self.running {
            out.push_running(
                name.clone(),
                RunningStats {
                    mean: r.mean.iter().map(|v| U::lit(v.as_f64())).collect(),
                    var: r.var.iter().map(|v| U::lit(v.as_f64())).collect(),
                    updates: r.updates,
                },
            );
        }
        out
    }
}

/// Result of building the network into a graph.
pub struct ForwardOutput<T> {
    pub logits: Var,
    /// Training-mode batch statistics, by running-stat index.
    pub batch_stats: Vec<(usize, BatchStats<T>)>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Residual network bound to a configuration.
#[derive(Clone, Debug)]
pub struct ResNet {
    pub cfg: ResNetConfig,
}

fn conv_name(prefix: &str) -> String {
    format!("{prefix}.w")
}

impl ResNet {
    pub fn new(cfg: ResNetConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(ResNet { cfg })
    }

    /// He-normal conv weights (`std = sqrt(2 / fan_in)`), `sqrt(1 / fan_in)`
    /// for the classifier, zero classifier bias, BN `gamma = 1`, `beta = 0`.
    pub fn init_params<T: Real, R: Rng + ?Sized>(&self, rng: &mut R) -> Params<T> {
        let cfg = &self.cfg;
        let mut p = Params::default();
        let conv = |p: &mut Params<T>, rng: &mut R, name: &str, cout: usize, cin: usize, k: usize| {
            let fan_in = (cin * k * k) as f64;
            let dist = Normal::new(0.0, (2.0 / fan_in).sqrt()).expect("positive std");
            let shape = Shape4::new(cout, cin, k, k);
            let data = (0..shape.numel()).map(|_| T::lit(dist.sample(rng))).collect();
            p.push(conv_name(name), ParamRole::ConvWeight, Tensor4::new(shape, data).expect("sized"));
        };
        let bn = |p: &mut Params<T>, name: &str, c: usize| {
            let s = Shape4::new(1, c, 1, 1);
            p.push(format!("{name}.gamma"), ParamRole::BnGamma, Tensor4::ones(s));
            p.push(format!("{name}.beta"), ParamRole::BnBeta, Tensor4::zeros(s));
            p.push_running(name.to_string(), RunningStats::new(c));
        };

        conv(&mut p, rng, "stem.conv", cfg.widths[0], cfg.in_channels, 3);
        bn(&mut p, "stem.bn", cfg.widths[0]);
        let mut cin = cfg.stage1_input();
        for (s, &width) in cfg.widths.iter().enumerate() {
            for b in 0..cfg.blocks_per_stage {
                let stride = if s > 0 && b == 0 { 2 } else { 1 };
                let pre = format!("s{}.b{}", s + 1, b);
                conv(&mut p, rng, &format!("{pre}.conv1"), width, cin, 3);
                bn(&mut p, &format!("{pre}.bn1"), width);
                conv(&mut p, rng, &format!("{pre}.conv2"), width, width, 3);
                bn(&mut p, &format!("{pre}.bn2"), width);
                if stride != 1 || cin != width {
                    conv(&mut p, rng, &format!("{pre}.short"), width, cin, 1);
                    bn(&mut p, &format!("{pre}.short_bn"), width);
                }
                cin = width;
            }
        }
        let d = cfg.widths[2];
        let dist = Normal::new(0.0, (1.0 / d as f64).sqrt()).expect("positive std");
        let shape = Shape4::new(d, cfg.classes, 1, 1);
        let data = (0..shape.numel()).map(|_| T::lit(dist.sample(rng))).collect();
        p.push("fc.w", ParamRole::FcWeight, Tensor4::new(shape, data).expect("sized"));
        p.push("fc.b", ParamRole::FcBias, Tensor4::zeros(Shape4::new(1, cfg.classes, 1, 1)));
        p
    }

    /// Build the forward pass into `g`. `exchange` is the already drawn
    /// exchange decision; it is applied at the configured insertion point when
    /// its `applied` flag is set.
    pub fn forward_in_graph<T: Real>(
        &self,
        g: &mut Graph<T>,
        params: &Params<T>,
        vars: &[Var],
        x: Var,
        mode: Mode,
        exchange: Option<(&MoExConfig, &ExchangeRecord)>,
    ) -> Result<ForwardOutput<T>> {
        if exchange.is_some() {
            if mode == Mode::Eval {
                return Err(Error::Config("moment exchange is training-only".into()));
            }
            if self.cfg.variant != Variant::MoexHooked {
                return Err(Error::Config(format!(
                    "moment exchange requires the moex-hooked variant, network is {:?}",
                    self.cfg.variant
                )));
            }
        }
        let mut ctx = Ctx {
            g,
            params,
            vars,
            mode,
            eps: T::lit(self.cfg.bn_eps),
            stats: Vec::new(),
        };
        let hook = |ctx: &mut Ctx<'_, T>, h: Var, at: InsertionPoint| -> Result<Var> {
            match exchange {
                Some((cfg, rec)) if rec.applied && cfg.insertion == at => {
                    exchange_in_graph(ctx.g, h, &rec.perm, &cfg.scheme, cfg.mode)
                }
                _ => Ok(h),
            }
        };

        let h = ctx.conv(x, "stem.conv", 1, 1)?;
        let h = ctx.bn(h, "stem.bn")?;
        let mut h = ctx.g.relu(h);
        h = match self.cfg.variant {
            Variant::MomentsOnly => moment_feature_map_in_graph(ctx.g, h, self.cfg.moment_eps)?,
            Variant::NormalizedOnly => {
                let scheme = NormScheme::new(NormKind::Pono).with_eps(self.cfg.moment_eps);
                analyze_in_graph(ctx.g, h, &scheme)?.normalized
            }
            Variant::Baseline | Variant::MoexHooked => h,
        };
        h = hook(&mut ctx, h, InsertionPoint::AfterFirstBlock)?;

        let mut cin = self.cfg.stage1_input();
        for (s, &width) in self.cfg.widths.iter().enumerate() {
            if s == 1 {
                h = hook(&mut ctx, h, InsertionPoint::BeforeStage2)?;
            } else if s == 2 {
                h = hook(&mut ctx, h, InsertionPoint::BeforeStage3)?;
            }
            for b in 0..self.cfg.blocks_per_stage {
                let stride = if s > 0 && b == 0 { 2 } else { 1 };
                let pre = format!("s{}.b{}", s + 1, b);
                let projected = stride != 1 || cin != width;
                h = ctx.block(h, &pre, stride, projected)?;
                cin = width;
            }
        }
        let pooled = ctx.g.global_avg_pool(h);
        let (w, b) = (ctx.var("fc.w")?, ctx.var("fc.b")?);
        let logits = ctx.g.affine(pooled, w, b)?;
        Ok(ForwardOutput {
            logits,
            batch_stats: ctx.stats,
        })
    }

    /// Standalone forward pass. With `moex`, the exchange decision is drawn
    /// from the supplied rng (permutation, then the Bernoulli gate) and
    /// returned alongside the logits.
    pub fn forward<T: Real, R: Rng + ?Sized>(
        &self,
        params: &Params<T>,
        x: &Tensor4<T>,
        moex: Option<(&MoExConfig, &mut R)>,
        mode: Mode,
    ) -> Result<(Tensor4<T>, Option<ExchangeRecord>)> {
        let record = match moex {
            Some((cfg, rng)) => Some((cfg, draw_exchange(rng, x.shape().n, cfg))),
            None => None,
        };
        let mut g = Graph::new();
        let vars = params.register(&mut g);
        let xv = g.constant(x.clone());
        let out = self.forward_in_graph(&mut g, params, &vars, xv, mode, record.as_ref().map(|(c, r)| (*c, r)))?;
        Ok((g.value(out.logits).clone(), record.map(|(_, r)| r)))
    }

    /// Eval-mode logits.
    pub fn predict<T: Real>(&self, params: &Params<T>, x: &Tensor4<T>) -> Result<Tensor4<T>> {
        Ok(self.forward::<T, rand_chacha::ChaCha8Rng>(params, x, None, Mode::Eval)?.0)
    }

    /// Output of the stem block (`Conv-BN-ReLU`) in eval mode.
    pub fn stem_features<T: Real>(&self, params: &Params<T>, x: &Tensor4<T>) -> Result<Tensor4<T>> {
        let mut g = Graph::new();
        let vars = params.register(&mut g);
        let xv = g.constant(x.clone());
        let mut ctx = Ctx {
            g: &mut g,
            params,
            vars: &vars,
            mode: Mode::Eval,
            eps: T::lit(self.cfg.bn_eps),
            stats: Vec::new(),
        };
        let h = ctx.conv(xv, "stem.conv", 1, 1)?;
        let h = ctx.bn(h, "stem.bn")?;
        let h = ctx.g.relu(h);
        Ok(g.value(h).clone())
    }
}

struct Ctx<'a, T: Real> {
    g: &'a mut Graph<T>,
    params: &'a Params<T>,
    vars: &'a [Var],
    mode: Mode,
    eps: T,
    stats: Vec<(usize, BatchStats<T>)>,
}

impl<T: Real> Ctx<'_, T> {
    fn var(&self, name: &str) -> Result<Var> {
        Ok(self.vars[self.params.position(name)?])
    }

    fn conv(&mut self, x: Var, name: &str, stride: usize, pad: usize) -> Result<Var> {
        let w = self.var(&conv_name(name))?;
        self.g.conv2d(x, w, None, stride, pad)
    }

    fn bn(&mut self, x: Var, name: &str) -> Result<Var> {
        let gamma = self.var(&format!("{name}.gamma"))?;
        let beta = self.var(&format!("{name}.beta"))?;
        let ri = self.params.running_position(name)?;
        match self.mode {
            Mode::Train => {
                let (y, stats) = self.g.batch_norm(x, gamma, beta, BnMode::Train, self.eps)?;
                self.stats.push((ri, stats.expect("training mode reports statistics")));
                Ok(y)
            }
            Mode::Eval => {
                let rs = &self.params.running[ri].1;
                if rs.updates == 0 {
                    log::warn!("batch norm `{name}` evaluated before any training update; using initial statistics");
                }
                let (y, _) = self.g.batch_norm(
                    x,
                    gamma,
                    beta,
                    BnMode::Eval {
                        mean: &rs.mean,
                        var: &rs.var,
                    },
                    self.eps,
                )?;
                Ok(y)
            }
        }
    }

    fn block(&mut self, x: Var, pre: &str, stride: usize, projected: bool) -> Result<Var> {
        let h = self.conv(x, &format!("{pre}.conv1"), stride, 1)?;
        let h = self.bn(h, &format!("{pre}.bn1"))?;
        let h = self.g.relu(h);
        let h = self.conv(h, &format!("{pre}.conv2"), 1, 1)?;
        let h = self.bn(h, &format!("{pre}.bn2"))?;
        let shortcut = if projected {
            let s = self.conv(x, &format!("{pre}.short"), stride, 0)?;
            self.bn(s, &format!("{pre}.short_bn"))?
        } else {
            x
        };
        let sum = self.g.add(h, shortcut)?;
        Ok(self.g.relu(sum))
    }
}
