//! Invertible intra-instance normalization.
//!
//! [`analyze`] splits a feature map into normalized features and the first two
//! moments of each reduction slice; [`synthesize`] recombines them. The
//! reduction slice depends on the scheme:
//!
//! | scheme | reduces over | moment shape |
//! |--------|--------------|--------------|
//! | PONO   | `C`          | `(N,1,H,W)`  |
//! | IN     | `H,W`        | `(N,C,1,1)`  |
//! | LN     | `C,H,W`      | `(N,1,1,1)`  |
//! | GN(g)  | `C/g,H,W`    | `(N,g,1,1)`  |
//! | UN2    | `C`, mean fixed at 0 | `(N,1,H,W)` |
//!
//! Variances use the population convention and `eps` sits under the square
//! root, so every standard deviation is at least `sqrt(eps)`.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::pgm::GrayImage;
use crate::tensor::{Axes, Real, Shape4, Tensor4};

pub const DEFAULT_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormKind {
    /// Positional normalization: across channels at each position.
    Pono,
    /// Instance normalization: across positions within each channel.
    Instance,
    /// Layer normalization: across the whole instance.
    Layer,
    /// Group normalization with the given group count.
    Group(usize),
    /// Unnormalized second moment across channels (mean left in place).
    Un2,
}

impl fmt::Display for NormKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            NormKind::Pono => write!(f, "pono"),
            NormKind::Instance => write!(f, "in"),
            NormKind::Layer => write!(f, "ln"),
            NormKind::Group(g) => write!(f, "gn{g}"),
            NormKind::Un2 => write!(f, "un2"),
        }
    }
}

impl std::str::FromStr for NormKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "pono" => Ok(NormKind::Pono),
            "in" => Ok(NormKind::Instance),
            "ln" => Ok(NormKind::Layer),
            "un2" => Ok(NormKind::Un2),
            _ => s
                .strip_prefix("gn")
                .and_then(|g| g.parse().ok())
                .filter(|&g: &usize| g > 0)
                .map(NormKind::Group)
                .ok_or_else(|| format!("unknown normalization scheme `{s}`")),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormScheme {
    pub kind: NormKind,
    pub eps: f64,
}

impl Default for NormScheme {
    fn default() -> Self {
        NormScheme::new(NormKind::Pono)
    }
}

impl NormScheme {
    pub fn new(kind: NormKind) -> Self {
        NormScheme {
            kind,
            eps: DEFAULT_EPS,
        }
    }

    pub fn with_eps(mut self, eps: f64) -> Self {
        self.eps = eps;
        self
    }

    pub fn validate(&self, shape: Shape4) -> Result<()> {
        if !(self.eps > 0.0) {
            return Err(Error::invalid("normalization", format!("eps must be positive, got {}", self.eps)));
        }
        if let NormKind::Group(g) = self.kind {
            if g == 0 || shape.c % g != 0 {
                return Err(Error::GroupMismatch {
                    groups: g,
                    channels: shape.c,
                });
            }
        }
        Ok(())
    }

    /// The shape the features are viewed as, and the axes reduced in that view.
    pub fn view(&self, shape: Shape4) -> Result<(Shape4, Axes)> {
        self.validate(shape)?;
        Ok(match self.kind {
            NormKind::Pono | NormKind::Un2 => (shape, Axes::C),
            NormKind::Instance => (shape, Axes::HW),
            NormKind::Layer => (shape, Axes::CHW),
            NormKind::Group(g) => (
                Shape4::new(shape.n, g, shape.c / g * shape.h, shape.w),
                Axes::HW,
            ),
        })
    }

    pub fn moment_shape(&self, shape: Shape4) -> Result<Shape4> {
        let (view, axes) = self.view(shape)?;
        Ok(view.reduced(axes))
    }

    fn centered(&self) -> bool {
        self.kind != NormKind::Un2
    }
}

/// First and second moments of each reduction slice.
#[derive(Clone, Debug, PartialEq)]
pub struct MomentPair<T> {
    pub mean: Tensor4<T>,
    pub std: Tensor4<T>,
    pub kind: NormKind,
}

impl<T: Real> MomentPair<T> {
    /// Moments of batch instance `perm[i]` placed at position `i`.
    pub fn permuted(&self, perm: &[usize]) -> Result<Self> {
        Ok(MomentPair {
            mean: self.mean.gather_batch(perm)?,
            std: self.std.gather_batch(perm)?,
            kind: self.kind,
        })
    }
}

/// Features with their slice moments removed.
#[derive(Clone, Debug, PartialEq)]
pub struct NormalizedFeatures<T> {
    pub values: Tensor4<T>,
    pub kind: NormKind,
}

/// Decompose `h` into normalized features and moments.
pub fn analyze<T: Real>(
    h: &Tensor4<T>,
    scheme: &NormScheme,
) -> Result<(NormalizedFeatures<T>, MomentPair<T>)> {
    if !h.is_finite() {
        return Err(Error::invalid("analyze", "features contain non-finite values"));
    }
    let shape = h.shape();
    let (view, axes) = scheme.view(shape)?;
    let hv = h.reshape(view)?;
    let eps = T::lit(scheme.eps);
    let mean = if scheme.centered() {
        hv.reduce_mean(axes)
    } else {
        Tensor4::zeros(view.reduced(axes))
    };
    let std = hv
        .broadcast_zip(&mean, |a, m| (a - m) * (a - m))?
        .reduce_mean(axes)
        .map(|v| (v + eps).sqrt());
    let normalized = hv
        .broadcast_zip(&mean, |a, m| a - m)?
        .broadcast_zip(&std, |a, s| a / s)?
        .into_shape(shape)?;
    Ok((
        NormalizedFeatures {
            values: normalized,
            kind: scheme.kind,
        },
        MomentPair {
            mean,
            std,
            kind: scheme.kind,
        },
    ))
}

/// Inverse of [`analyze`]: `std * normalized + mean`.
pub fn synthesize<T: Real>(normalized: &NormalizedFeatures<T>, moments: &MomentPair<T>) -> Result<Tensor4<T>> {
    if normalized.kind != moments.kind {
        return Err(Error::SchemeMismatch {
            features: normalized.kind.to_string(),
            moments: moments.kind.to_string(),
        });
    }
    let shape = normalized.values.shape();
    // eps only matters for validation here
    let (view, axes) = NormScheme::new(moments.kind).view(shape)?;
    let expected = view.reduced(axes);
    for t in [&moments.mean, &moments.std] {
        if t.shape() != expected {
            return Err(Error::shape("synthesize", expected, t.shape()));
        }
    }
    if moments.std.data().iter().any(|s| !(*s > T::zero())) {
        return Err(Error::invalid("synthesize", "standard deviations must be positive"));
    }
    normalized
        .values
        .reshape(view)?
        .broadcast_zip(&moments.std, |a, s| a * s)?
        .broadcast_zip(&moments.mean, |a, m| a + m)?
        .into_shape(shape)
}

/// In-graph decomposition. `normalized` lives in the scheme's view shape (it
/// differs from the feature shape only for group normalization).
#[derive(Clone, Copy, Debug)]
pub struct Decomposition {
    pub normalized: Var,
    pub mean: Var,
    pub std: Var,
    pub shape: Shape4,
}

/// Differentiable [`analyze`]: the moments remain functions of `h`.
pub fn analyze_in_graph<T: Real>(g: &mut Graph<T>, h: Var, scheme: &NormScheme) -> Result<Decomposition> {
    let shape = g.shape(h);
    let (view, axes) = scheme.view(shape)?;
    let hv = if view == shape { h } else { g.reshape(h, view)? };
    let eps = T::lit(scheme.eps);
    let std = g.moment_std(hv, axes, eps, scheme.centered())?;
    let (mean, centered) = if scheme.centered() {
        let m = g.reduce_mean(hv, axes);
        (m, g.sub(hv, m)?)
    } else {
        (g.constant(Tensor4::zeros(view.reduced(axes))), hv)
    };
    let normalized = g.div(centered, std)?;
    Ok(Decomposition {
        normalized,
        mean,
        std,
        shape,
    })
}

/// Differentiable [`synthesize`] returning features in `shape`.
pub fn synthesize_in_graph<T: Real>(
    g: &mut Graph<T>,
    normalized: Var,
    mean: Var,
    std: Var,
    shape: Shape4,
) -> Result<Var> {
    let scaled = g.mul(normalized, std)?;
    let out = g.add(scaled, mean)?;
    if g.shape(out) == shape {
        Ok(out)
    } else {
        g.reshape(out, shape)
    }
}

/// PONO mean and standard deviation stacked as a two-channel map.
pub fn moment_feature_map<T: Real>(h: &Tensor4<T>, eps: f64) -> Result<Tensor4<T>> {
    let (_, m) = analyze(h, &NormScheme::new(NormKind::Pono).with_eps(eps))?;
    let s = h.shape();
    let mut data = Vec::with_capacity(s.n * 2 * s.h * s.w);
    for n in 0..s.n {
        data.extend_from_slice(m.mean.instance(n));
        data.extend_from_slice(m.std.instance(n));
    }
    Tensor4::new(Shape4::new(s.n, 2, s.h, s.w), data)
}

/// Differentiable [`moment_feature_map`].
pub fn moment_feature_map_in_graph<T: Real>(g: &mut Graph<T>, h: Var, eps: f64) -> Result<Var> {
    let d = analyze_in_graph(g, h, &NormScheme::new(NormKind::Pono).with_eps(eps))?;
    g.concat_channels(&[d.mean, d.std])
}

/// A rendered moment map and the value range mapped onto `[0, 255]`.
#[derive(Clone, Debug, PartialEq)]
pub struct MomentImage {
    pub image: GrayImage,
    pub min: f64,
    pub max: f64,
}

impl MomentImage {
    /// Value a pixel level stands for; constant maps return `min`.
    pub fn value_at_level(&self, level: u8) -> f64 {
        if self.max > self.min {
            self.min + (self.max - self.min) * f64::from(level) / 255.0
        } else {
            self.min
        }
    }
}

/// Min-max scale a map to 8-bit gray. Constant maps render as 128.
pub fn render_gray(values: &[f64], width: usize, height: usize) -> MomentImage {
    let min = values.iter().copied().fold(f64::INFINITY, f64::min);
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let flat = !(max - min > 1e-12 * max.abs().max(1.0));
    let pixels = values
        .iter()
        .map(|&v| {
            if flat {
                128
            } else {
                (255.0 * (v - min) / (max - min)).round().clamp(0.0, 255.0) as u8
            }
        })
        .collect();
    MomentImage {
        image: GrayImage::new(width, height, pixels),
        min,
        max: if flat { min } else { max },
    }
}

/// PONO mean and std maps of a single instance rendered as grayscale images.
pub fn moment_images<T: Real>(h: &Tensor4<T>, eps: f64) -> Result<(MomentImage, MomentImage)> {
    let s = h.shape();
    if s.n != 1 {
        return Err(Error::invalid("moment_images", format!("expected one instance, got {}", s.n)));
    }
    let maps = moment_feature_map(h, eps)?;
    let plane = s.h * s.w;
    let to_f64 = |vals: &[T]| vals.iter().map(|v| v.as_f64()).collect::<Vec<_>>();
    let mean = to_f64(&maps.data()[..plane]);
    let std = to_f64(&maps.data()[plane..]);
    Ok((render_gray(&mean, s.w, s.h), render_gray(&std, s.w, s.h)))
}
