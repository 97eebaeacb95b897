//! Moment exchange: re-inject the moments of a permuted partner into each
//! instance's normalized features, and interpolate the two labels in the loss.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::model::InsertionPoint;
use crate::normalization::{analyze, analyze_in_graph, synthesize, synthesize_in_graph, MomentPair, NormScheme};
use crate::ops;
use crate::tensor::{Real, Shape4, Tensor4};

/// Which moments are taken from the partner instance.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExchangeMode {
    #[default]
    Both,
    MeanOnly,
    StdOnly,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MoExConfig {
    pub scheme: NormScheme,
    pub insertion: InsertionPoint,
    /// Probability that a batch is exchanged.
    pub p: f64,
    /// Weight of the instance's own label.
    pub lambda: f64,
    pub mode: ExchangeMode,
}

impl Default for MoExConfig {
    fn default() -> Self {
        MoExConfig {
            scheme: NormScheme::default(),
            insertion: InsertionPoint::AfterFirstBlock,
            p: 0.5,
            lambda: 0.9,
            mode: ExchangeMode::Both,
        }
    }
}

fn unit_interval(name: &str, v: f64) -> Result<()> {
    if (0.0..=1.0).contains(&v) {
        Ok(())
    } else {
        Err(Error::Config(format!("{name} must lie in [0, 1], got {v}")))
    }
}

impl MoExConfig {
    pub fn validate(&self) -> Result<()> {
        unit_interval("moex p", self.p)?;
        unit_interval("moex lambda", self.lambda)?;
        if !(self.scheme.eps > 0.0) {
            return Err(Error::Config(format!("moex eps must be positive, got {}", self.scheme.eps)));
        }
        Ok(())
    }
}

/// Outcome of the per-batch exchange draw.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExchangeRecord {
    /// Instance `i` receives the moments of instance `perm[i]`.
    pub perm: Vec<usize>,
    pub applied: bool,
    pub lambda: f64,
}

impl ExchangeRecord {
    pub fn identity(n: usize, lambda: f64) -> Self {
        ExchangeRecord {
            perm: (0..n).collect(),
            applied: true,
            lambda,
        }
    }

    /// Labels of the moment donors, `y[perm]`, or `y` itself when the batch
    /// was left untouched.
    pub fn donor_targets<T: Real>(&self, y: &Tensor4<T>) -> Result<Tensor4<T>> {
        if self.applied {
            y.gather_batch(&self.perm)
        } else {
            Ok(y.clone())
        }
    }
}

/// Uniform random permutation of `0..n`; fixed points are allowed.
pub fn sample_permutation<R: Rng + ?Sized>(rng: &mut R, n: usize) -> Vec<usize> {
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(rng);
    perm
}

/// Draw the permutation, then the Bernoulli(`p`) gate, from `rng`.
pub fn draw_exchange<R: Rng + ?Sized>(rng: &mut R, n: usize, cfg: &MoExConfig) -> ExchangeRecord {
    let perm = sample_permutation(rng, n);
    let applied = rng.random_bool(cfg.p);
    ExchangeRecord {
        perm,
        applied,
        lambda: cfg.lambda,
    }
}

fn check_perm(perm: &[usize], n: usize) -> Result<()> {
    let mut seen = vec![false; n];
    if perm.len() != n {
        return Err(Error::invalid("exchange", format!("permutation of length {} for batch {n}", perm.len())));
    }
    for &p in perm {
        if p >= n || std::mem::replace(&mut seen[p], true) {
            return Err(Error::invalid("exchange", "index list is not a permutation"));
        }
    }
    Ok(())
}

fn mix_moments<T: Real>(own: &MomentPair<T>, donor: MomentPair<T>, mode: ExchangeMode) -> MomentPair<T> {
    match mode {
        ExchangeMode::Both => donor,
        ExchangeMode::MeanOnly => MomentPair {
            mean: donor.mean,
            std: own.std.clone(),
            kind: own.kind,
        },
        ExchangeMode::StdOnly => MomentPair {
            mean: own.mean.clone(),
            std: donor.std,
            kind: own.kind,
        },
    }
}

/// Instance `i` of the output is instance `i`'s normalized features carrying
/// the moments of instance `perm[i]` (restricted by `mode`).
pub fn exchange_batch<T: Real>(
    h: &Tensor4<T>,
    perm: &[usize],
    scheme: &NormScheme,
    mode: ExchangeMode,
) -> Result<Tensor4<T>> {
    check_perm(perm, h.shape().n)?;
    let (normalized, moments) = analyze(h, scheme)?;
    let donor = moments.permuted(perm)?;
    synthesize(&normalized, &mix_moments(&moments, donor, mode))
}

/// Differentiable [`exchange_batch`]. Gradients flow into both the receiving
/// instance and the moment donor.
pub fn exchange_in_graph<T: Real>(
    g: &mut Graph<T>,
    h: Var,
    perm: &[usize],
    scheme: &NormScheme,
    mode: ExchangeMode,
) -> Result<Var> {
    check_perm(perm, g.shape(h).n)?;
    let d = analyze_in_graph(g, h, scheme)?;
    let (mean, std) = match mode {
        ExchangeMode::Both => (g.gather_batch(d.mean, perm)?, g.gather_batch(d.std, perm)?),
        ExchangeMode::MeanOnly => (g.gather_batch(d.mean, perm)?, d.std),
        ExchangeMode::StdOnly => (d.mean, g.gather_batch(d.std, perm)?),
    };
    synthesize_in_graph(g, d.normalized, mean, std, d.shape)
}

/// Rows of `labels` as one-hot vectors over `classes`.
pub fn one_hot<T: Real>(labels: &[usize], classes: usize) -> Tensor4<T> {
    Tensor4::from_fn(Shape4::matrix(labels.len(), classes), |n, c, _, _| {
        if labels[n] == c {
            T::one()
        } else {
            T::zero()
        }
    })
}

/// `lambda * y_a + (1 - lambda) * y_b`.
pub fn mixed_target<T: Real>(y_a: &Tensor4<T>, y_b: &Tensor4<T>, lambda: f64) -> Result<Tensor4<T>> {
    unit_interval("lambda", lambda)?;
    let l = T::lit(lambda);
    y_a.zip_map(y_b, |a, b| l * a + (T::one() - l) * b)
}

pub fn cross_entropy<T: Real>(logits: &Tensor4<T>, target: &Tensor4<T>) -> Result<T> {
    Ok(ops::softmax_cross_entropy(logits, target)?.0)
}

/// `lambda * CE(logits, y_a) + (1 - lambda) * CE(logits, y_b)`.
pub fn interpolated_loss<T: Real>(
    logits: &Tensor4<T>,
    y_a: &Tensor4<T>,
    y_b: &Tensor4<T>,
    lambda: f64,
) -> Result<T> {
    unit_interval("lambda", lambda)?;
    let l = T::lit(lambda);
    Ok(l * cross_entropy(logits, y_a)? + (T::one() - l) * cross_entropy(logits, y_b)?)
}

/// Differentiable two-term [`interpolated_loss`].
pub fn interpolated_loss_in_graph<T: Real>(
    g: &mut Graph<T>,
    logits: Var,
    y_a: &Tensor4<T>,
    y_b: &Tensor4<T>,
    lambda: f64,
) -> Result<Var> {
    unit_interval("lambda", lambda)?;
    let l = T::lit(lambda);
    let own = g.softmax_cross_entropy(logits, y_a)?;
    let donor = g.softmax_cross_entropy(logits, y_b)?;
    let own = g.scale(own, l);
    let donor = g.scale(donor, T::one() - l);
    g.add(own, donor)
}

/// Target rows with mass `lambda` on the label and `(1 - lambda) / (K - 1)`
/// on every other class.
pub fn label_smooth_target<T: Real>(labels: &[usize], lambda: f64, classes: usize) -> Result<Tensor4<T>> {
    if classes < 2 {
        return Err(Error::invalid("label smoothing", format!("needs at least 2 classes, got {classes}")));
    }
    unit_interval("lambda", lambda)?;
    if let Some(&bad) = labels.iter().find(|&&y| y >= classes) {
        return Err(Error::invalid("label smoothing", format!("label {bad} out of range")));
    }
    let on = T::lit(lambda);
    let off = T::lit((1.0 - lambda) / (classes - 1) as f64);
    Ok(Tensor4::from_fn(Shape4::matrix(labels.len(), classes), |n, c, _, _| {
        if labels[n] == c {
            on
        } else {
            off
        }
    }))
}

pub fn label_smooth_loss<T: Real>(logits: &Tensor4<T>, labels: &[usize], lambda: f64, classes: usize) -> Result<T> {
    cross_entropy(logits, &label_smooth_target(labels, lambda, classes)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn single_element_permutation_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        assert_eq!(sample_permutation(&mut rng, 1), vec![0]);
    }

    #[test]
    fn lambda_out_of_range_rejected() {
        let y = one_hot::<f64>(&[0, 1], 2);
        let z = Tensor4::zeros(y.shape());
        assert!(interpolated_loss(&z, &y, &y, 1.5).is_err());
        assert!(interpolated_loss(&z, &y, &y, -0.1).is_err());
    }

    #[test]
    fn smoothing_needs_two_classes() {
        assert!(label_smooth_target::<f64>(&[0], 0.9, 1).is_err());
    }

    #[test]
    fn non_permutation_rejected() {
        let h = Tensor4::<f64>::ones(Shape4::new(3, 2, 1, 1));
        assert!(exchange_batch(&h, &[0, 0, 1], &NormScheme::default(), ExchangeMode::Both).is_err());
        assert!(exchange_batch(&h, &[0, 1], &NormScheme::default(), ExchangeMode::Both).is_err());
    }

    #[test]
    fn p_zero_never_applies_and_p_one_always_does() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut cfg = MoExConfig {
            p: 0.0,
            ..MoExConfig::default()
        };
        assert!((0..200).all(|_| !draw_exchange(&mut rng, 8, &cfg).applied));
        cfg.p = 1.0;
        assert!((0..200).all(|_| draw_exchange(&mut rng, 8, &cfg).applied));
    }

    #[test]
    fn untouched_batch_keeps_own_labels() {
        let y = one_hot::<f64>(&[0, 1, 2], 3);
        let rec = ExchangeRecord {
            perm: vec![2, 0, 1],
            applied: false,
            lambda: 0.9,
        };
        assert_eq!(rec.donor_targets(&y).unwrap(), y);
    }
}
