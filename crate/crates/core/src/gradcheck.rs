//! Finite-difference verification of the reverse-mode gradients.
//!
//! Each check builds `L = sum(op(inputs) * W)` for a fixed random `W`, takes
//! analytic gradients with [`Graph::backward`] and compares them against
//! central differences. The reported error for an input tensor is
//! `max_i |a_i - n_i| / max(max|a|, max|n|)`; a check reports the worst of
//! its inputs.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use crate::autodiff::{BnMode, Graph, Var};
use crate::error::Result;
use crate::model::{Mode, ResNet, ResNetConfig, Variant};
use crate::moex::{exchange_in_graph, interpolated_loss_in_graph, one_hot, ExchangeMode, ExchangeRecord, MoExConfig};
use crate::normalization::{analyze_in_graph, moment_feature_map_in_graph, synthesize_in_graph, NormKind, NormScheme};
use crate::tensor::{Axes, Shape4, Tensor4};

pub const DEFAULT_TOLERANCE: f64 = 1e-4;
pub const DEFAULT_STEP: f64 = 1e-5;

#[derive(Clone, Debug, Serialize)]
pub struct CheckRow {
    pub name: String,
    pub max_rel_err: f64,
    pub coordinates: usize,
    pub tolerance: f64,
}

impl CheckRow {
    pub fn passed(&self) -> bool {
        self.max_rel_err <= self.tolerance
    }
}

/// Relative error metric between two gradient tensors.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let scale = analytic
        .iter()
        .chain(numeric)
        .fold(0.0f64, |m, v| m.max(v.abs()))
        .max(1e-12);
    let diff = analytic
        .iter()
        .zip(numeric)
        .fold(0.0f64, |m, (a, n)| m.max((a - n).abs()));
    diff / scale
}

type Build<'a> = dyn Fn(&mut Graph<f64>, &[Var]) -> Result<Var> + 'a;

/// Check `build` at `inputs`. With `max_coords`, at most that many randomly
/// chosen coordinates per input are perturbed.
pub fn check_op(
    name: &str,
    inputs: &[Tensor4<f64>],
    build: &Build<'_>,
    max_coords: Option<usize>,
    step: f64,
    rng: &mut ChaCha8Rng,
) -> Result<CheckRow> {
    let eval = |vals: &[Tensor4<f64>], weights: &Tensor4<f64>| -> Result<(Graph<f64>, Vec<Var>, Var)> {
        let mut g = Graph::new();
        let vars: Vec<Var> = vals.iter().map(|t| g.param(t.clone())).collect();
        let out = build(&mut g, &vars)?;
        let wv = g.constant(weights.clone());
        let prod = g.mul(out, wv)?;
        let loss = g.sum(prod);
        Ok((g, vars, loss))
    };
    let out_shape = {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
        let out = build(&mut g, &vars)?;
        g.shape(out)
    };
    let weights = Tensor4::from_fn(out_shape, |_, _, _, _| rng.sample::<f64, _>(StandardNormal));
    let (mut g, vars, root) = eval(inputs, &weights)?;
    let mut grads = g.backward(root)?;

    let loss_at = |vals: &[Tensor4<f64>]| -> Result<f64> {
        let (g, _, root) = eval(vals, &weights)?;
        Ok(g.value(root).item())
    };
    let mut worst = 0.0f64;
    let mut coordinates = 0;
    for (i, input) in inputs.iter().enumerate() {
        let analytic_full = grads
            .take(vars[i])
            .unwrap_or_else(|| Tensor4::zeros(input.shape()));
        let picks: Vec<usize> = match max_coords {
            Some(k) if k < input.len() => {
                let mut v = sample(rng, input.len(), k).into_vec();
                v.sort_unstable();
                v
            }
            _ => (0..input.len()).collect(),
        };
        let mut analytic = Vec::with_capacity(picks.len());
        let mut numeric = Vec::with_capacity(picks.len());
        let mut vals = inputs.to_vec();
        for &j in &picks {
            let orig = input.data()[j];
            vals[i].data_mut()[j] = orig + step;
            let up = loss_at(&vals)?;
            vals[i].data_mut()[j] = orig - step;
            let down = loss_at(&vals)?;
            vals[i].data_mut()[j] = orig;
            numeric.push((up - down) / (2.0 * step));
            analytic.push(analytic_full.data()[j]);
        }
        coordinates += picks.len();
        worst = worst.max(relative_error(&analytic, &numeric));
    }
    Ok(CheckRow {
        name: name.to_string(),
        max_rel_err: worst,
        coordinates,
        tolerance: DEFAULT_TOLERANCE,
    })
}

fn randn(rng: &mut ChaCha8Rng, shape: Shape4) -> Tensor4<f64> {
    Tensor4::from_fn(shape, |_, _, _, _| rng.sample(StandardNormal))
}

/// Values bounded away from zero so ReLU kinks and `sqrt`/`div` poles are not
/// straddled by the perturbation.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: Shape4, lo: f64) -> Tensor4<f64> {
    Tensor4::from_fn(shape, |_, _, _, _| {
        let m = lo + rng.random::<f64>();
        if rng.random_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

fn positive(rng: &mut ChaCha8Rng, shape: Shape4) -> Tensor4<f64> {
    Tensor4::from_fn(shape, |_, _, _, _| 0.5 + rng.random::<f64>())
}

fn softmax_targets(rng: &mut ChaCha8Rng, n: usize, k: usize) -> Tensor4<f64> {
    let mut t = Tensor4::from_fn(Shape4::matrix(n, k), |_, _, _, _| rng.random::<f64>() + 0.1);
    for row in t.data_mut().chunks_mut(k) {
        let s: f64 = row.iter().sum();
        row.iter_mut().for_each(|v| *v /= s);
    }
    t
}

/// Finite-difference checks over every differentiable primitive.
pub fn primitive_suite(seed: u64) -> Result<Vec<CheckRow>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let h = DEFAULT_STEP;
    let mut rows = Vec::new();
    let s = Shape4::new(2, 3, 4, 4);

    let x = randn(&mut rng, Shape4::new(2, 3, 5, 5));
    let w = randn(&mut rng, Shape4::new(4, 3, 3, 3));
    let b = randn(&mut rng, Shape4::new(1, 4, 1, 1));
    rows.push(check_op("conv2d s1 p1 +bias", &[x.clone(), w.clone(), b], &|g, v| g.conv2d(v[0], v[1], Some(v[2]), 1, 1), None, h, &mut rng)?);
    rows.push(check_op("conv2d s2 p0", &[x.clone(), w], &|g, v| g.conv2d(v[0], v[1], None, 2, 0), None, h, &mut rng)?);
    let w1 = randn(&mut rng, Shape4::new(5, 3, 1, 1));
    rows.push(check_op("conv2d 1x1", &[x, w1], &|g, v| g.conv2d(v[0], v[1], None, 1, 0), None, h, &mut rng)?);

    let a = away_from_zero(&mut rng, s, 0.1);
    rows.push(check_op("relu", &[a], &|g, v| Ok(g.relu(v[0])), None, h, &mut rng)?);

    let a = randn(&mut rng, s);
    let bc = randn(&mut rng, Shape4::new(2, 1, 4, 4));
    let den = positive(&mut rng, Shape4::new(2, 3, 1, 1));
    rows.push(check_op("add (broadcast)", &[a.clone(), bc.clone()], &|g, v| g.add(v[0], v[1]), None, h, &mut rng)?);
    rows.push(check_op("sub (broadcast)", &[a.clone(), bc.clone()], &|g, v| g.sub(v[0], v[1]), None, h, &mut rng)?);
    rows.push(check_op("mul (broadcast)", &[a.clone(), bc], &|g, v| g.mul(v[0], v[1]), None, h, &mut rng)?);
    rows.push(check_op("div (broadcast)", &[a.clone(), den], &|g, v| g.div(v[0], v[1]), None, h, &mut rng)?);
    rows.push(check_op("scale", &[a.clone()], &|g, v| Ok(g.scale(v[0], -1.7)), None, h, &mut rng)?);
    rows.push(check_op("add_scalar", &[a.clone()], &|g, v| Ok(g.add_scalar(v[0], 0.3)), None, h, &mut rng)?);
    let p = positive(&mut rng, s);
    rows.push(check_op("sqrt", &[p], &|g, v| Ok(g.sqrt(v[0])), None, h, &mut rng)?);
    rows.push(check_op("sum", &[a.clone()], &|g, v| Ok(g.sum(v[0])), None, h, &mut rng)?);
    for (label, axes) in [("C", Axes::C), ("HW", Axes::HW), ("CHW", Axes::CHW), ("NHW", Axes::NHW)] {
        rows.push(check_op(&format!("reduce_mean {label}"), &[a.clone()], &|g, v| Ok(g.reduce_mean(v[0], axes)), None, h, &mut rng)?);
    }
    rows.push(check_op("reshape", &[a.clone()], &|g, v| g.reshape(v[0], Shape4::new(2, 1, 12, 4)), None, h, &mut rng)?);
    let batch = randn(&mut rng, Shape4::new(4, 2, 3, 3));
    rows.push(check_op("gather_batch", &[batch.clone()], &|g, v| g.gather_batch(v[0], &[2, 2, 0, 1]), None, h, &mut rng)?);
    rows.push(check_op("global_avg_pool", &[a.clone()], &|g, v| Ok(g.global_avg_pool(v[0])), None, h, &mut rng)?);
    let fx = randn(&mut rng, Shape4::new(3, 4, 1, 1));
    let fw = randn(&mut rng, Shape4::new(4, 5, 1, 1));
    let fb = randn(&mut rng, Shape4::new(1, 5, 1, 1));
    rows.push(check_op("affine", &[fx, fw, fb], &|g, v| g.affine(v[0], v[1], v[2]), None, h, &mut rng)?);

    let bx = randn(&mut rng, Shape4::new(3, 4, 3, 3));
    let gamma = away_from_zero(&mut rng, Shape4::new(1, 4, 1, 1), 0.5);
    let beta = randn(&mut rng, Shape4::new(1, 4, 1, 1));
    rows.push(check_op(
        "batch_norm train",
        &[bx.clone(), gamma.clone(), beta.clone()],
        &|g, v| Ok(g.batch_norm(v[0], v[1], v[2], BnMode::Train, 1e-5)?.0),
        None,
        h,
        &mut rng,
    )?);
    let rm = vec![0.1, -0.2, 0.3, 0.0];
    let rv = vec![1.5, 0.7, 1.0, 2.0];
    rows.push(check_op(
        "batch_norm eval",
        &[bx, gamma, beta],
        &|g, v| {
            Ok(g.batch_norm(v[0], v[1], v[2], BnMode::Eval { mean: &rm, var: &rv }, 1e-5)?.0)
        },
        None,
        h,
        &mut rng,
    )?);

    let logits = randn(&mut rng, Shape4::matrix(4, 5));
    let target = softmax_targets(&mut rng, 4, 5);
    rows.push(check_op("softmax_cross_entropy", &[logits], &|g, v| g.softmax_cross_entropy(v[0], &target), None, h, &mut rng)?);
    rows.push(check_op("moment_std centered", &[a.clone()], &|g, v| g.moment_std(v[0], Axes::C, 1e-5, true), None, h, &mut rng)?);
    rows.push(check_op("moment_std uncentered", &[a.clone()], &|g, v| g.moment_std(v[0], Axes::HW, 1e-5, false), None, h, &mut rng)?);
    let other = randn(&mut rng, Shape4::new(2, 2, 4, 4));
    rows.push(check_op("concat_channels", &[a.clone(), other], &|g, v| g.concat_channels(&[v[0], v[1]]), None, h, &mut rng)?);

    let feats = randn(&mut rng, Shape4::new(4, 8, 3, 3));
    for kind in [NormKind::Pono, NormKind::Instance, NormKind::Layer, NormKind::Group(4), NormKind::Un2] {
        let scheme = NormScheme::new(kind);
        rows.push(check_op(
            &format!("analyze+synthesize {kind}"),
            &[feats.clone()],
            &|g, v| {
                let d = analyze_in_graph(g, v[0], &scheme)?;
                let std2 = g.scale(d.std, 0.5);
                synthesize_in_graph(g, d.normalized, d.mean, std2, d.shape)
            },
            None,
            h,
            &mut rng,
        )?);
        for mode in [ExchangeMode::Both, ExchangeMode::MeanOnly, ExchangeMode::StdOnly] {
            rows.push(check_op(
                &format!("exchange {kind} {mode:?}"),
                &[feats.clone()],
                &|g, v| exchange_in_graph(g, v[0], &[1, 3, 0, 2], &scheme, mode),
                None,
                h,
                &mut rng,
            )?);
        }
    }
    rows.push(check_op("moment_feature_map", &[feats], &|g, v| moment_feature_map_in_graph(g, v[0], 1e-5), None, h, &mut rng)?);
    Ok(rows)
}

/// Shape of the whole-network check.
pub fn toy_network(variant: Variant) -> ResNetConfig {
    ResNetConfig {
        blocks_per_stage: 1,
        widths: [8, 8, 16],
        in_channels: 8,
        classes: 4,
        variant,
        ..ResNetConfig::default()
    }
}

/// Gradient of the interpolated loss of a moment-exchanging network at input
/// shape `(4, 8, 8, 8)`, exchange forced on with a fixed derangement, against
/// central differences on `coords` sampled coordinates per tensor.
pub fn network_check(seed: u64, insertion: crate::model::InsertionPoint, coords: usize) -> Result<CheckRow> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let net = ResNet::new(toy_network(Variant::MoexHooked))?;
    let params = net.init_params::<f64, _>(&mut rng);
    let x = randn(&mut rng, Shape4::new(4, 8, 8, 8));
    let y_a = one_hot::<f64>(&[0, 1, 2, 3], 4);
    let cfg = MoExConfig {
        insertion,
        ..MoExConfig::default()
    };
    let record = ExchangeRecord {
        perm: vec![2, 0, 3, 1],
        applied: true,
        lambda: cfg.lambda,
    };
    let y_b = record.donor_targets(&y_a)?;
    let mut inputs: Vec<Tensor4<f64>> = params.params.iter().map(|p| p.value.clone()).collect();
    inputs.push(x);
    let n_params = params.len();
    let build = |g: &mut Graph<f64>, v: &[Var]| -> Result<Var> {
        let out = net.forward_in_graph(g, &params, &v[..n_params], v[n_params], Mode::Train, Some((&cfg, &record)))?;
        interpolated_loss_in_graph(g, out.logits, &y_a, &y_b, record.lambda)
    };
    let mut row = check_op(
        &format!("moex network @{insertion}"),
        &inputs,
        &build,
        Some(coords),
        DEFAULT_STEP,
        &mut rng,
    )?;
    row.name = format!("moex network (N=4, C=8, 8x8) @{insertion}");
    Ok(row)
}

/// Primitive suite plus the network check at every insertion point.
pub fn full_suite(seed: u64) -> Result<Vec<CheckRow>> {
    let mut rows = primitive_suite(seed)?;
    for at in [
        crate::model::InsertionPoint::AfterFirstBlock,
        crate::model::InsertionPoint::BeforeStage2,
        crate::model::InsertionPoint::BeforeStage3,
    ] {
        rows.push(network_check(seed, at, 12)?);
    }
    Ok(rows)
}

/// Fixed-width text table of check results.
pub fn render_table(rows: &[CheckRow]) -> String {
    let width = rows.iter().map(|r| r.name.len()).max().unwrap_or(4).max(4);
    let mut s = format!("{:<width$}  {:>12}  {:>6}  {}\n", "check", "max_rel_err", "coords", "status");
    for r in rows {
        s.push_str(&format!(
            "{:<width$}  {:>12.3e}  {:>6}  {}\n",
            r.name,
            r.max_rel_err,
            r.coordinates,
            if r.passed() { "ok" } else { "FAIL" }
        ));
    }
    s
}
