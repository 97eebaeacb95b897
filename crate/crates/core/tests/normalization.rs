use moex::moex::sample_permutation;
use moex::normalization::{moment_feature_map, moment_images, DEFAULT_EPS};
use moex::{analyze, exchange_batch, synthesize, ExchangeMode, MomentPair, NormKind, NormScheme, NormalizedFeatures, Shape4, Tensor4};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

fn randn(rng: &mut ChaCha8Rng, shape: Shape4, scale: f64) -> Tensor4<f64> {
    Tensor4::from_fn(shape, |_, _, _, _| {
        let z: f64 = StandardNormal.sample(rng);
        scale * z
    })
}

/// Slice id of element `(n, c, h, w)` under each scheme, written out directly.
fn slice_of(kind: NormKind, s: Shape4, n: usize, c: usize, h: usize, w: usize) -> usize {
    match kind {
        NormKind::Pono | NormKind::Un2 => (n * s.h + h) * s.w + w,
        NormKind::Instance => n * s.c + c,
        NormKind::Layer => n,
        NormKind::Group(g) => n * g + c / (s.c / g),
    }
}

/// Per-slice (mean, std) by brute force.
fn oracle_moments(h: &Tensor4<f64>, kind: NormKind, eps: f64) -> Vec<(f64, f64)> {
    let s = h.shape();
    let slices = match kind {
        NormKind::Pono | NormKind::Un2 => s.n * s.h * s.w,
        NormKind::Instance => s.n * s.c,
        NormKind::Layer => s.n,
        NormKind::Group(g) => s.n * g,
    };
    let mut members: Vec<Vec<f64>> = vec![Vec::new(); slices];
    for n in 0..s.n {
        for c in 0..s.c {
            for y in 0..s.h {
                for x in 0..s.w {
                    members[slice_of(kind, s, n, c, y, x)].push(h.at(n, c, y, x));
                }
            }
        }
    }
    members
        .iter()
        .map(|v| {
            let k = v.len() as f64;
            let mean = if kind == NormKind::Un2 { 0.0 } else { v.iter().sum::<f64>() / k };
            let var = v.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / k;
            (mean, (var + eps).sqrt())
        })
        .collect()
}

fn kinds(c: usize) -> Vec<NormKind> {
    let mut out = vec![NormKind::Pono, NormKind::Instance, NormKind::Layer, NormKind::Un2];
    out.extend((1..=c).filter(|g| c % g == 0).map(NormKind::Group));
    out
}

fn tensor_strategy() -> impl Strategy<Value = Tensor4<f64>> {
    (1usize..4, 1usize..7, 1usize..5, 1usize..5).prop_flat_map(|(n, c, h, w)| {
        let shape = Shape4::new(n, c, h, w);
        proptest::collection::vec(-20.0f64..20.0, shape.numel())
            .prop_map(move |v| Tensor4::new(shape, v).unwrap())
    })
}

proptest! {
    #[test]
    fn round_trip_recovers_input(h in tensor_strategy()) {
        for kind in kinds(h.shape().c) {
            let scheme = NormScheme::new(kind);
            let (hat, m) = analyze(&h, &scheme).unwrap();
            let back = synthesize(&hat, &m).unwrap();
            prop_assert!(back.max_abs_diff(&h).unwrap() <= 1e-10, "{kind}");
        }
    }

    #[test]
    fn moments_match_brute_force(h in tensor_strategy()) {
        let s = h.shape();
        for kind in kinds(s.c) {
            let (hat, m) = analyze(&h, &NormScheme::new(kind)).unwrap();
            let expected = oracle_moments(&h, kind, DEFAULT_EPS);
            let expected_shape = match kind {
                NormKind::Pono | NormKind::Un2 => Shape4::new(s.n, 1, s.h, s.w),
                NormKind::Instance => Shape4::new(s.n, s.c, 1, 1),
                NormKind::Layer => Shape4::new(s.n, 1, 1, 1),
                NormKind::Group(g) => Shape4::new(s.n, g, 1, 1),
            };
            prop_assert_eq!(m.mean.shape(), expected_shape);
            prop_assert_eq!(m.std.shape(), expected_shape);
            for (i, &(mu, sigma)) in expected.iter().enumerate() {
                prop_assert!((m.mean.data()[i] - mu).abs() <= 1e-10);
                prop_assert!((m.std.data()[i] - sigma).abs() <= 1e-10);
                prop_assert!(m.std.data()[i] >= DEFAULT_EPS.sqrt() - 1e-12);
            }
            for n in 0..s.n {
                for c in 0..s.c {
                    for y in 0..s.h {
                        for x in 0..s.w {
                            let (mu, sigma) = expected[slice_of(kind, s, n, c, y, x)];
                            let want = (h.at(n, c, y, x) - mu) / sigma;
                            prop_assert!((hat.values.at(n, c, y, x) - want).abs() <= 1e-10);
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn group_extremes_match_layer_and_instance(h in tensor_strategy()) {
        let c = h.shape().c;
        let ln = analyze(&h, &NormScheme::new(NormKind::Layer)).unwrap();
        let gn1 = analyze(&h, &NormScheme::new(NormKind::Group(1))).unwrap();
        prop_assert!(gn1.0.values.max_abs_diff(&ln.0.values).unwrap() <= 1e-10);
        let inst = analyze(&h, &NormScheme::new(NormKind::Instance)).unwrap();
        let gnc = analyze(&h, &NormScheme::new(NormKind::Group(c))).unwrap();
        prop_assert!(gnc.0.values.max_abs_diff(&inst.0.values).unwrap() <= 1e-10);
    }

    #[test]
    fn identity_permutation_leaves_features(h in tensor_strategy()) {
        let perm: Vec<usize> = (0..h.shape().n).collect();
        for kind in kinds(h.shape().c) {
            for mode in [ExchangeMode::Both, ExchangeMode::MeanOnly, ExchangeMode::StdOnly] {
                let out = exchange_batch(&h, &perm, &NormScheme::new(kind), mode).unwrap();
                prop_assert!(out.max_abs_diff(&h).unwrap() <= 1e-10);
            }
        }
    }

    #[test]
    fn single_moment_modes(h in tensor_strategy(), seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let perm = sample_permutation(&mut rng, h.shape().n);
        for kind in kinds(h.shape().c) {
            let scheme = NormScheme::new(kind);
            let (view, _) = scheme.view(h.shape()).unwrap();
            let (_, m) = analyze(&h, &scheme).unwrap();
            let donor = m.permuted(&perm).unwrap();
            let hv = h.reshape(view).unwrap();
            // mean only: a pure shift by the difference of means
            let out = exchange_batch(&h, &perm, &scheme, ExchangeMode::MeanOnly).unwrap().reshape(view).unwrap();
            let shift = donor.mean.zip_map(&m.mean, |b, a| b - a).unwrap();
            let want = hv.broadcast_zip(&shift, |x, d| x + d).unwrap();
            prop_assert!(out.max_abs_diff(&want).unwrap() <= 1e-9);
            // std only: rescale around the own mean
            let out = exchange_batch(&h, &perm, &scheme, ExchangeMode::StdOnly).unwrap().reshape(view).unwrap();
            let ratio = donor.std.zip_map(&m.std, |b, a| b / a).unwrap();
            let want = hv
                .broadcast_zip(&m.mean, |x, mu| x - mu).unwrap()
                .broadcast_zip(&ratio, |x, r| x * r).unwrap()
                .broadcast_zip(&m.mean, |x, mu| x + mu).unwrap();
            prop_assert!(out.max_abs_diff(&want).unwrap() <= 1e-8);
        }
    }
}

#[test]
fn normalized_slices_have_zero_mean_unit_std() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..200 {
        let shape = Shape4::new(rng.random_range(1..4), 8 * rng.random_range(1..3), rng.random_range(3..7), rng.random_range(3..7));
        let h = randn(&mut rng, shape, 1.0);
        for kind in [NormKind::Pono, NormKind::Instance, NormKind::Layer, NormKind::Group(4), NormKind::Un2] {
            let scheme = NormScheme::new(kind);
            let (hat, _) = analyze(&h, &scheme).unwrap();
            let (_, stats) = analyze(&hat.values, &scheme.with_eps(1e-300)).unwrap();
            for (&mu, &sd) in stats.mean.data().iter().zip(stats.std.data()) {
                if kind != NormKind::Un2 {
                    assert!(mu.abs() <= 1e-5, "{kind} mean {mu}");
                }
                assert!((sd - 1.0).abs() <= 1e-3, "{kind} std {sd}");
            }
        }
    }
}

#[test]
fn layer_norm_matches_flat_vectors() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let h = randn(&mut rng, Shape4::new(2, 3, 4, 5), 2.0);
    let (_, m) = analyze(&h, &NormScheme::new(NormKind::Layer)).unwrap();
    assert_eq!(m.mean.len(), 2);
    for n in 0..2 {
        let flat = h.instance(n);
        let mean = flat.iter().sum::<f64>() / flat.len() as f64;
        let var = flat.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / flat.len() as f64;
        assert!((m.mean.data()[n] - mean).abs() < 1e-12);
        assert!((m.std.data()[n] - (var + 1e-5).sqrt()).abs() < 1e-12);
    }
}

#[test]
fn identity_moments_return_content() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let shape = Shape4::new(2, 4, 3, 3);
    let values = randn(&mut rng, shape, 1.0);
    let hat = NormalizedFeatures {
        values: values.clone(),
        kind: NormKind::Pono,
    };
    let m = MomentPair {
        mean: Tensor4::zeros(Shape4::new(2, 1, 3, 3)),
        std: Tensor4::ones(Shape4::new(2, 1, 3, 3)),
        kind: NormKind::Pono,
    };
    assert_eq!(synthesize(&hat, &m).unwrap(), values);
}

#[test]
fn moment_map_contract() {
    let eps = DEFAULT_EPS;
    let flat = Tensor4::full(Shape4::new(2, 5, 3, 4), 2.5f64);
    let maps = moment_feature_map(&flat, eps).unwrap();
    assert_eq!(maps.shape(), Shape4::new(2, 2, 3, 4));
    for n in 0..2 {
        for y in 0..3 {
            for x in 0..4 {
                assert_eq!(maps.at(n, 0, y, x), 2.5);
                assert!((maps.at(n, 1, y, x) - eps.sqrt()).abs() < 1e-15);
            }
        }
    }
    let big = Tensor4::<f32>::zeros(Shape4::new(8, 64, 16, 16));
    assert_eq!(moment_feature_map(&big, eps).unwrap().shape(), Shape4::new(8, 2, 16, 16));

    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let h = randn(&mut rng, Shape4::new(3, 6, 5, 5), 3.0);
    let maps = moment_feature_map(&h, eps).unwrap();
    let (_, m) = analyze(&h, &NormScheme::new(NormKind::Pono)).unwrap();
    for n in 0..3 {
        for y in 0..5 {
            for x in 0..5 {
                assert_eq!(maps.at(n, 0, y, x), m.mean.at(n, 0, y, x));
                assert_eq!(maps.at(n, 1, y, x), m.std.at(n, 0, y, x));
            }
        }
    }
}

#[test]
fn moment_map_depends_only_on_moments() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let shape = Shape4::new(2, 16, 6, 6);
    let scheme = NormScheme::new(NormKind::Pono);
    let a = randn(&mut rng, shape, 10.0);
    let b = randn(&mut rng, shape, 10.0);
    let (_, moments) = analyze(&a, &scheme).unwrap();
    let (other_content, _) = analyze(&b, &scheme).unwrap();
    let twin = synthesize(&other_content, &moments).unwrap();
    assert!(twin.max_abs_diff(&a).unwrap() > 1.0);
    let diff = moment_feature_map(&twin, DEFAULT_EPS)
        .unwrap()
        .max_abs_diff(&moment_feature_map(&a, DEFAULT_EPS).unwrap())
        .unwrap();
    assert!(diff <= 1e-6, "{diff}");
}

#[test]
fn rendered_maps_invert_within_one_level() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let h = randn(&mut rng, Shape4::new(1, 8, 12, 10), 4.0);
    let maps = moment_feature_map(&h, DEFAULT_EPS).unwrap();
    let (mean, std) = moment_images(&h, DEFAULT_EPS).unwrap();
    for (ch, img) in [(0, &mean), (1, &std)] {
        assert_eq!((img.image.width, img.image.height), (10, 12));
        let level = (img.max - img.min) / 255.0;
        for y in 0..12 {
            for x in 0..10 {
                let back = img.value_at_level(img.image.pixels[y * 10 + x]);
                assert!((back - maps.at(0, ch, y, x)).abs() <= level + 1e-12);
            }
        }
    }
}

#[test]
fn swapping_two_instances_swaps_their_moments() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let scheme = NormScheme::new(NormKind::Pono);
    let h = randn(&mut rng, Shape4::new(2, 64, 6, 6), 10.0);
    let out = exchange_batch(&h, &[1, 0], &scheme, ExchangeMode::Both).unwrap();
    let (_, before) = analyze(&h, &scheme).unwrap();
    let (_, after) = analyze(&out, &scheme).unwrap();
    let swapped = before.permuted(&[1, 0]).unwrap();
    assert!(after.mean.max_abs_diff(&swapped.mean).unwrap() <= 1e-6);
    assert!(after.std.max_abs_diff(&swapped.std).unwrap() <= 1e-6);
}

#[test]
fn mean_only_equals_both_when_stds_agree() {
    // every instance gets exactly the same per-position spread
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let shape = Shape4::new(4, 8, 5, 5);
    let raw = randn(&mut rng, shape, 1.0);
    let (z, _) = analyze(&raw, &NormScheme::new(NormKind::Pono).with_eps(1e-300)).unwrap();
    let spread = randn(&mut rng, Shape4::new(1, 1, 5, 5), 1.0).map(|v| 1.0 + v.abs());
    let offsets = randn(&mut rng, Shape4::new(4, 1, 5, 5), 3.0);
    let h = z
        .values
        .broadcast_zip(&spread, |a, s| a * s)
        .unwrap()
        .broadcast_zip(&offsets, |a, m| a + m)
        .unwrap();
    let scheme = NormScheme::new(NormKind::Pono);
    let perm = [2, 3, 1, 0];
    let both = exchange_batch(&h, &perm, &scheme, ExchangeMode::Both).unwrap();
    let mean_only = exchange_batch(&h, &perm, &scheme, ExchangeMode::MeanOnly).unwrap();
    assert!(both.max_abs_diff(&mean_only).unwrap() <= 1e-10);
}

#[test]
fn un2_exchange_keeps_zero_mean_moment() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let h = randn(&mut rng, Shape4::new(3, 4, 2, 2), 1.0);
    let (_, m) = analyze(&h, &NormScheme::new(NormKind::Un2)).unwrap();
    assert!(m.mean.data().iter().all(|&v| v == 0.0));
    let out = exchange_batch(&h, &[1, 2, 0], &NormScheme::new(NormKind::Un2), ExchangeMode::Both).unwrap();
    // pure rescaling of each position by the donor's root mean square
    let ratio = m.permuted(&[1, 2, 0]).unwrap().std.zip_map(&m.std, |b, a| b / a).unwrap();
    let want = h.broadcast_zip(&ratio, |x, r| x * r).unwrap();
    assert!(out.max_abs_diff(&want).unwrap() <= 1e-10);
}

#[test]
fn two_element_permutations_are_fair() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let swaps = (0..10_000).filter(|_| sample_permutation(&mut rng, 2) == [1, 0]).count();
    assert!((swaps as f64 / 1e4 - 0.5).abs() <= 0.02, "{swaps}");
}

#[test]
fn five_element_permutations_have_uniform_marginals() {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let mut counts = [[0usize; 5]; 5];
    let draws = 100_000;
    for _ in 0..draws {
        for (pos, &v) in sample_permutation(&mut rng, 5).iter().enumerate() {
            counts[pos][v] += 1;
        }
    }
    for row in counts {
        for c in row {
            assert!((c as f64 / draws as f64 - 0.2).abs() <= 0.01);
        }
    }
}
