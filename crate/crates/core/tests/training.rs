use moex::data::sequential_batches;
use moex::model::{Mode, ParamRole, Params};
use moex::moex::one_hot;
use moex::ops::conv2d_forward;
use moex::train::{compute_step, count_errors, error_rate, RunOptions, TrainData};
use moex::{
    evaluate, synth_moment_dataset, train, ExchangeRecord, Graph, LossMode, MoExConfig, PixelAugment, ResNet,
    ResNetConfig, Sgd, Shape4, Tensor4, TrainConfig, Variant,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

fn randn(rng: &mut ChaCha8Rng, shape: Shape4) -> Tensor4<f64> {
    Tensor4::from_fn(shape, |_, _, _, _| StandardNormal.sample(rng))
}

fn toy(variant: Variant, in_channels: usize) -> ResNet {
    ResNet::new(ResNetConfig {
        blocks_per_stage: 1,
        widths: [8, 8, 16],
        in_channels,
        classes: 4,
        variant,
        ..ResNetConfig::default()
    })
    .unwrap()
}

fn train_logits(
    net: &ResNet,
    params: &Params<f64>,
    x: &Tensor4<f64>,
    exchange: Option<(&MoExConfig, &ExchangeRecord)>,
) -> Tensor4<f64> {
    let mut g = Graph::new();
    let vars = params.register(&mut g);
    let xv = g.constant(x.clone());
    let out = net.forward_in_graph(&mut g, params, &vars, xv, Mode::Train, exchange).unwrap();
    g.value(out.logits).clone()
}

#[test]
fn closed_gate_is_bit_identical_to_baseline() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let hooked = toy(Variant::MoexHooked, 3);
    let baseline = toy(Variant::Baseline, 3);
    let params = hooked.init_params::<f64, _>(&mut rng);
    let x = randn(&mut rng, Shape4::new(6, 3, 8, 8));
    let cfg = MoExConfig {
        p: 0.0,
        ..MoExConfig::default()
    };
    let mut gate_rng = ChaCha8Rng::seed_from_u64(2);
    let (gated, record) = hooked.forward(&params, &x, Some((&cfg, &mut gate_rng)), Mode::Train).unwrap();
    assert!(!record.unwrap().applied);
    let plain = baseline.forward::<f64, ChaCha8Rng>(&params, &x, None, Mode::Train).unwrap().0;
    assert_eq!(gated.data(), plain.data());
}

#[test]
fn identity_exchange_matches_baseline() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let net = toy(Variant::MoexHooked, 3);
    let params = net.init_params::<f64, _>(&mut rng);
    let x = randn(&mut rng, Shape4::new(5, 3, 8, 8));
    let cfg = MoExConfig::default();
    let same = train_logits(&net, &params, &x, Some((&cfg, &ExchangeRecord::identity(5, 0.9))));
    let plain = train_logits(&net, &params, &x, None);
    assert!(same.max_abs_diff(&plain).unwrap() <= 1e-10);
    let swapped = ExchangeRecord {
        perm: vec![1, 2, 3, 4, 0],
        applied: true,
        lambda: 0.9,
    };
    assert!(train_logits(&net, &params, &x, Some((&cfg, &swapped))).max_abs_diff(&plain).unwrap() > 1e-6);
}

/// Reorder the stem's output channels. PONO moments of the stem output are
/// unchanged while the normalized content is permuted.
fn permute_stem(params: &mut Params<f64>, perm: &[usize]) {
    for name in ["stem.conv.w", "stem.bn.gamma", "stem.bn.beta"] {
        let i = params.position(name).unwrap();
        let old = params.params[i].value.clone();
        let s = old.shape();
        params.params[i].value = if s.n == perm.len() {
            Tensor4::from_fn(s, |o, c, y, x| old.at(perm[o], c, y, x))
        } else {
            Tensor4::from_fn(s, |n, c, y, x| old.at(n, perm[c], y, x))
        };
    }
}

#[test]
fn moments_only_logits_depend_only_on_moments() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let net = toy(Variant::MomentsOnly, 3);
    let mut params = net.init_params::<f64, _>(&mut rng);
    for name in ["stem.bn.gamma", "stem.bn.beta"] {
        let i = params.position(name).unwrap();
        let shape = params.params[i].value.shape();
        params.params[i].value = Tensor4::from_fn(shape, |_, _, _, _| rng.random_range(0.5..1.5));
    }
    let x = randn(&mut rng, Shape4::new(4, 3, 8, 8));
    let mut twin = params.clone();
    permute_stem(&mut twin, &[3, 0, 7, 1, 6, 2, 5, 4]);

    let a = net.stem_features(&params, &x).unwrap();
    let b = net.stem_features(&twin, &x).unwrap();
    assert!(a.max_abs_diff(&b).unwrap() > 1e-3);
    let la = train_logits(&net, &params, &x, None);
    let lb = train_logits(&net, &twin, &x, None);
    assert!(la.max_abs_diff(&lb).unwrap() <= 1e-6);
}

#[test]
fn initialisation_statistics() {
    let net = ResNet::new(ResNetConfig::default()).unwrap();
    let a = net.init_params::<f64, _>(&mut ChaCha8Rng::seed_from_u64(9));
    let b = net.init_params::<f64, _>(&mut ChaCha8Rng::seed_from_u64(9));
    assert_eq!(a, b);
    let mut large = 0;
    for p in &a.params {
        let v = p.value.data();
        let all_zero = v.iter().all(|&x| x == 0.0);
        match p.role {
            ParamRole::FcBias | ParamRole::BnBeta => assert!(all_zero, "{}", p.name),
            _ => assert!(!all_zero, "{}", p.name),
        }
        if p.role == ParamRole::ConvWeight && v.len() >= 4096 {
            large += 1;
            let s = p.value.shape();
            let want = (2.0 / (s.c * s.h * s.w) as f64).sqrt();
            let mean = v.iter().sum::<f64>() / v.len() as f64;
            let sd = (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / v.len() as f64).sqrt();
            assert!((sd / want - 1.0).abs() <= 0.1, "{}: {sd} vs {want}", p.name);
        }
    }
    assert!(large >= 6);
}

#[test]
fn every_parameter_gets_a_gradient_of_its_shape() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let net = toy(Variant::Baseline, 3);
    let mut params = net.init_params::<f64, _>(&mut rng);
    let x = randn(&mut rng, Shape4::new(4, 3, 8, 8));
    let y = one_hot::<f64>(&[0, 1, 2, 3], 4);
    let step = compute_step(&net, &mut params, &x, &y, LossMode::Plain, None, None).unwrap();
    assert_eq!(step.grads.len(), params.len());
    for (g, p) in step.grads.iter().zip(&params.params) {
        assert_eq!(g.as_ref().unwrap().shape(), p.value.shape(), "{}", p.name);
    }
}

fn single(name: &str, role: ParamRole, values: &[f64]) -> Params<f64> {
    let mut p = Params::default();
    p.push(name, role, Tensor4::from_f64(Shape4::new(1, values.len(), 1, 1), values).unwrap());
    p
}

#[test]
fn sgd_matches_hand_derived_momentum_steps() {
    // loss = |w - a|^2 / 2, so the gradient is w - a
    let target = [0.5, -1.0];
    let mut p = single("w", ParamRole::ConvWeight, &[1.0, 2.0]);
    let mut sgd = Sgd::new(&p, 0.9, 0.1);
    for _ in 0..2 {
        let w = p.params[0].value.clone();
        let g = Tensor4::from_fn(w.shape(), |_, c, _, _| w.at(0, c, 0, 0) - target[c]);
        sgd.step(&mut p, &[Some(g)], 0.1).unwrap();
    }
    // v1 = g0 + wd w0 = [0.6, 3.2], w1 = [0.94, 1.68]
    // v2 = 0.9 v1 + (w1 - a) + wd w1 = [1.074, 5.728], w2 = w1 - 0.1 v2
    let w = p.params[0].value.data();
    assert!((w[0] - 0.8326).abs() <= 1e-10);
    assert!((w[1] - 1.1072).abs() <= 1e-10);
}

#[test]
fn weight_decay_is_an_exact_shrink_and_skips_bn() {
    let (lr, wd) = (0.05, 5e-4);
    let w0 = [0.3, -1.7, 2.5];
    let mut p = single("w", ParamRole::ConvWeight, &w0);
    p.push("gamma", ParamRole::BnGamma, Tensor4::from_f64(Shape4::new(1, 3, 1, 1), &w0).unwrap());
    let mut sgd = Sgd::new(&p, 0.0, wd);
    let zero = Some(Tensor4::zeros(Shape4::new(1, 3, 1, 1)));
    sgd.step(&mut p, &[zero.clone(), zero], lr).unwrap();
    for (i, &w) in w0.iter().enumerate() {
        assert_eq!(p.params[0].value.data()[i], w - lr * (wd * w));
        assert_eq!(p.params[1].value.data()[i], w);
    }
}

#[test]
fn zero_learning_rate_freezes_parameters() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let net = toy(Variant::Baseline, 3);
    let mut params = net.init_params::<f64, _>(&mut rng);
    let before = params.params.clone();
    let mut sgd = Sgd::new(&params, 0.9, 5e-4);
    for _ in 0..3 {
        let grads: Vec<_> = params.params.iter().map(|p| Some(randn(&mut rng, p.value.shape()))).collect();
        sgd.step(&mut params, &grads, 0.0).unwrap();
    }
    assert_eq!(params.params, before);
}

#[test]
fn running_statistics_follow_the_scripted_average() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let net = toy(Variant::Baseline, 8);
    let mut params = net.init_params::<f64, _>(&mut rng);
    let w = params.get("stem.conv.w").unwrap().value.clone();
    let y = one_hot::<f64>(&[0, 1, 2, 3], 4);
    let (mut mean, mut var) = (vec![0.0; 8], vec![1.0; 8]);
    for _ in 0..3 {
        let x = randn(&mut rng, Shape4::new(4, 8, 8, 8)).map(|v| 2.0 * v + 0.5);
        compute_step(&net, &mut params, &x, &y, LossMode::Plain, None, None).unwrap();
        let h = conv2d_forward(&x, &w, None, 1, 1).unwrap();
        for c in 0..8 {
            let vals: Vec<f64> = (0..4).flat_map(|n| (0..64).map(move |i| (n, i))).map(|(n, i)| h.at(n, c, i / 8, i % 8)).collect();
            let k = vals.len() as f64;
            let m = vals.iter().sum::<f64>() / k;
            let unbiased = vals.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (k - 1.0);
            mean[c] = 0.9 * mean[c] + 0.1 * m;
            var[c] = 0.9 * var[c] + 0.1 * unbiased;
        }
    }
    let running = params.running("stem.bn").unwrap();
    assert_eq!(running.updates, 3);
    for c in 0..8 {
        assert!((running.mean[c] - mean[c]).abs() <= 1e-6);
        assert!((running.var[c] - var[c]).abs() <= 1e-6);
    }
    let x = randn(&mut rng, Shape4::new(2, 8, 8, 8));
    let h = conv2d_forward(&x, &w, None, 1, 1).unwrap();
    let want = Tensor4::from_fn(h.shape(), |n, c, yy, xx| ((h.at(n, c, yy, xx) - mean[c]) / (var[c] + 1e-5).sqrt()).max(0.0));
    let got = net.stem_features(&params, &x).unwrap();
    assert!(got.max_abs_diff(&want).unwrap() <= 1e-6);
    assert_eq!(got, net.stem_features(&params, &x).unwrap());
}

#[test]
fn random_logits_miss_nine_in_ten() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let n = 20_000;
    let logits = randn(&mut rng, Shape4::matrix(n, 10));
    let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..10)).collect();
    assert!((error_rate(&logits, &labels) - 90.0).abs() <= 2.0);
    let memorized = one_hot::<f64>(&labels, 10).scale(10.0);
    assert_eq!(count_errors(&memorized, &labels), 0);
}

fn tiny_config(seed: u64) -> TrainConfig {
    TrainConfig {
        epochs: 2,
        batch_size: 16,
        seed,
        augment: PixelAugment::CropFlip,
        ..TrainConfig::default()
    }
}

#[test]
fn training_is_deterministic_and_gate_zero_is_inert() {
    let train_set = synth_moment_dataset(1, 4, 10).unwrap().data;
    let test_set = synth_moment_dataset(2, 2, 10).unwrap().data;
    let data = TrainData {
        train: &train_set,
        test: &test_set,
        stats: train_set.channel_stats(),
    };
    let small = ResNetConfig {
        blocks_per_stage: 1,
        widths: [8, 8, 16],
        ..ResNetConfig::default()
    };
    let net = ResNet::new(small).unwrap();
    let a = train::<f32>(&tiny_config(3), &net, &data, RunOptions::default()).unwrap();
    let b = train::<f32>(&tiny_config(3), &net, &data, RunOptions::default()).unwrap();
    assert_eq!(a.history, b.history);
    assert_eq!(a.params, b.params);
    assert_eq!(a.history.len(), 2);

    let hooked = ResNet::new(ResNetConfig {
        variant: Variant::MoexHooked,
        ..small
    })
    .unwrap();
    let cfg = TrainConfig {
        moex: Some(MoExConfig {
            p: 0.0,
            ..MoExConfig::default()
        }),
        loss: LossMode::MoexInterpolated,
        ..tiny_config(3)
    };
    let gated = train::<f32>(&cfg, &hooked, &data, RunOptions::default()).unwrap();
    assert_eq!(gated.history, a.history);
    assert_eq!(gated.params, a.params);
    assert!(gated.rng_log.iter().all(|e| !e.applied));
}

#[test]
fn evaluate_agrees_with_confusion_matrix() {
    let train_set = synth_moment_dataset(3, 3, 10).unwrap().data;
    let test_set = synth_moment_dataset(4, 3, 10).unwrap().data;
    let stats = train_set.channel_stats();
    let data = TrainData {
        train: &train_set,
        test: &test_set,
        stats,
    };
    let net = ResNet::new(ResNetConfig {
        blocks_per_stage: 1,
        widths: [8, 8, 16],
        ..ResNetConfig::default()
    })
    .unwrap();
    let cfg = TrainConfig {
        epochs: 1,
        batch_size: 10,
        ..TrainConfig::default()
    };
    let out = train::<f64>(&cfg, &net, &data, RunOptions::default()).unwrap();
    let err = evaluate(&net, &out.params, &test_set, &stats, 7).unwrap();

    let mut confusion = [[0usize; 10]; 10];
    let batch = sequential_batches::<f64>(&test_set, test_set.len(), &stats).next().unwrap();
    let logits = net.predict(&out.params, &batch.x).unwrap();
    for (row, &label) in logits.data().chunks(10).zip(&batch.labels) {
        let mut best = 0;
        for k in 1..10 {
            if row[k] > row[best] {
                best = k;
            }
        }
        confusion[label][best] += 1;
    }
    let correct: usize = (0..10).map(|k| confusion[k][k]).sum();
    let acc = 100.0 * correct as f64 / test_set.len() as f64;
    assert!((err - (100.0 - acc)).abs() <= 1e-9);
    assert!((err - out.history[0].test_err).abs() <= 1e-9);
}
