//! Pixel-space augmentations: random translation and mirroring, Cutout, Mixup
//! and CutMix.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor4};

pub const CHANNELS: usize = 3;

/// A `3 x H x W` image stored plane by plane.
#[derive(Clone, Debug, PartialEq)]
pub struct Image<P> {
    pub height: usize,
    pub width: usize,
    pub data: Vec<P>,
}

impl<P: Copy + Default> Image<P> {
    pub fn new(height: usize, width: usize, data: Vec<P>) -> Self {
        assert_eq!(data.len(), CHANNELS * height * width, "image buffer length");
        Image { height, width, data }
    }

    pub fn filled(height: usize, width: usize, v: P) -> Self {
        Image::new(height, width, vec![v; CHANNELS * height * width])
    }

    #[inline]
    pub fn at(&self, c: usize, y: usize, x: usize) -> P {
        self.data[(c * self.height + y) * self.width + x]
    }

    #[inline]
    fn set(&mut self, c: usize, y: usize, x: usize, v: P) {
        self.data[(c * self.height + y) * self.width + x] = v;
    }

    pub fn pixels(&self) -> usize {
        self.height * self.width
    }
}

/// Half-open pixel rectangle `[y0, y1) x [x0, x1)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Rect {
    pub y0: usize,
    pub y1: usize,
    pub x0: usize,
    pub x1: usize,
}

impl Rect {
    pub const EMPTY: Rect = Rect {
        y0: 0,
        y1: 0,
        x0: 0,
        x1: 0,
    };

    pub fn area(&self) -> usize {
        self.y1.saturating_sub(self.y0) * self.x1.saturating_sub(self.x0)
    }

    pub fn contains(&self, y: usize, x: usize) -> bool {
        (self.y0..self.y1).contains(&y) && (self.x0..self.x1).contains(&x)
    }

    /// Box of extent `(h, w)` centred at `(cy, cx)` with `lo = c - extent / 2`
    /// and `hi = c + extent / 2` (integer halves), clipped to the image.
    pub fn centered(cy: usize, cx: usize, h: usize, w: usize, height: usize, width: usize) -> Rect {
        let clip = |c: usize, half: usize, hi_extent: usize, limit: usize| {
            let lo = c.saturating_sub(half).min(limit);
            let hi = (c + hi_extent).min(limit);
            (lo, hi)
        };
        let (y0, y1) = clip(cy, h / 2, h - h / 2, height);
        let (x0, x1) = clip(cx, w / 2, w - w / 2, width);
        Rect { y0, y1, x0, x1 }
    }
}

/// Zero-pad by `pad` on every side, then take the `H x W` window whose top-left
/// corner sits at `(dy, dx)` in padded coordinates (`0..=2 * pad`).
pub fn pad_crop_at<P: Copy + Default>(img: &Image<P>, pad: usize, dy: usize, dx: usize) -> Image<P> {
    assert!(dy <= 2 * pad && dx <= 2 * pad, "crop offset outside padded image");
    let mut out = Image::filled(img.height, img.width, P::default());
    for c in 0..CHANNELS {
        for y in 0..img.height {
            let sy = (y + dy) as isize - pad as isize;
            if sy < 0 || sy >= img.height as isize {
                continue;
            }
            for x in 0..img.width {
                let sx = (x + dx) as isize - pad as isize;
                if sx >= 0 && sx < img.width as isize {
                    out.set(c, y, x, img.at(c, sy as usize, sx as usize));
                }
            }
        }
    }
    out
}

pub fn sample_crop_offset<R: Rng + ?Sized>(rng: &mut R, pad: usize) -> (usize, usize) {
    (rng.random_range(0..=2 * pad), rng.random_range(0..=2 * pad))
}

/// Random translation: pad by `pad`, then a uniformly placed crop.
pub fn pad_crop<P: Copy + Default, R: Rng + ?Sized>(img: &Image<P>, pad: usize, rng: &mut R) -> Image<P> {
    let (dy, dx) = sample_crop_offset(rng, pad);
    pad_crop_at(img, pad, dy, dx)
}

/// Mirror the width axis.
pub fn mirror<P: Copy + Default>(img: &Image<P>) -> Image<P> {
    let mut out = img.clone();
    for c in 0..CHANNELS {
        for y in 0..img.height {
            for x in 0..img.width {
                out.set(c, y, x, img.at(c, y, img.width - 1 - x));
            }
        }
    }
    out
}

/// Mirror with probability `p`.
pub fn hflip<P: Copy + Default, R: Rng + ?Sized>(img: &Image<P>, p: f64, rng: &mut R) -> Image<P> {
    if rng.random_bool(p) {
        mirror(img)
    } else {
        img.clone()
    }
}

/// The `size x size` square Cutout masks for a given centre.
pub fn cutout_rect(height: usize, width: usize, size: usize, cy: usize, cx: usize) -> Rect {
    Rect::centered(cy, cx, size, size, height, width)
}

pub fn apply_mask<P: Copy + Default>(img: &Image<P>, rect: Rect) -> Image<P> {
    let mut out = img.clone();
    for c in 0..CHANNELS {
        for y in rect.y0..rect.y1 {
            for x in rect.x0..rect.x1 {
                out.set(c, y, x, P::default());
            }
        }
    }
    out
}

/// Zero a `size x size` square with a uniformly drawn centre, clipped at the
/// borders. Labels are not affected.
pub fn cutout<P: Copy + Default, R: Rng + ?Sized>(img: &Image<P>, size: usize, rng: &mut R) -> Image<P> {
    let cy = rng.random_range(0..img.height);
    let cx = rng.random_range(0..img.width);
    apply_mask(img, cutout_rect(img.height, img.width, size, cy, cx))
}

/// An image with the two label rows it was built from and the weight of the
/// first one.
#[derive(Clone, Debug, PartialEq)]
pub struct AugmentedExample<T> {
    pub image: Image<T>,
    pub y_a: Vec<T>,
    pub y_b: Vec<T>,
    pub lambda_pixel: f64,
}

impl<T: Real> AugmentedExample<T> {
    /// Mixed target row `lambda_pixel * y_a + (1 - lambda_pixel) * y_b`.
    pub fn target(&self) -> Vec<T> {
        let l = T::lit(self.lambda_pixel);
        self.y_a
            .iter()
            .zip(&self.y_b)
            .map(|(&a, &b)| l * a + (T::one() - l) * b)
            .collect()
    }
}

fn same_dims<T>(a: &Image<T>, b: &Image<T>) -> Result<()> {
    if (a.height, a.width) != (b.height, b.width) {
        return Err(Error::invalid(
            "pixel mixing",
            format!("{}x{} vs {}x{}", a.height, a.width, b.height, b.width),
        ));
    }
    Ok(())
}

/// `lambda * x_a + (1 - lambda) * x_b` with the labels weighted alike.
pub fn mixup<T: Real>(
    x_a: &Image<T>,
    x_b: &Image<T>,
    y_a: &[T],
    y_b: &[T],
    lambda: f64,
) -> Result<AugmentedExample<T>> {
    same_dims(x_a, x_b)?;
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::invalid("mixup", format!("lambda {lambda} outside [0, 1]")));
    }
    let l = T::lit(lambda);
    let data = x_a
        .data
        .iter()
        .zip(&x_b.data)
        .map(|(&a, &b)| l * a + (T::one() - l) * b)
        .collect();
    Ok(AugmentedExample {
        image: Image::new(x_a.height, x_a.width, data),
        y_a: y_a.to_vec(),
        y_b: y_b.to_vec(),
        lambda_pixel: lambda,
    })
}

/// CutMix box: side lengths `H * sqrt(1 - l0)` and `W * sqrt(1 - l0)` with
/// `l0 ~ U[0, 1]`, uniformly placed centre, clipped to the image.
pub fn sample_cutmix_rect<R: Rng + ?Sized>(rng: &mut R, height: usize, width: usize) -> Rect {
    let l0: f64 = rng.random();
    let ratio = (1.0 - l0).sqrt();
    let cut_h = (height as f64 * ratio) as usize;
    let cut_w = (width as f64 * ratio) as usize;
    let cy = rng.random_range(0..height);
    let cx = rng.random_range(0..width);
    Rect::centered(cy, cx, cut_h, cut_w, height, width)
}

/// Paste `rect` of `x_b` into `x_a`; the label weight of `x_a` is the fraction
/// of pixels it still contributes.
pub fn cutmix_with_rect<T: Real>(
    x_a: &Image<T>,
    x_b: &Image<T>,
    y_a: &[T],
    y_b: &[T],
    rect: Rect,
) -> Result<AugmentedExample<T>> {
    same_dims(x_a, x_b)?;
    if rect.y1 > x_a.height || rect.x1 > x_a.width {
        return Err(Error::invalid("cutmix", "rectangle exceeds the image"));
    }
    let mut image = x_a.clone();
    for c in 0..CHANNELS {
        for y in rect.y0..rect.y1 {
            for x in rect.x0..rect.x1 {
                image.set(c, y, x, x_b.at(c, y, x));
            }
        }
    }
    let lambda_pixel = 1.0 - rect.area() as f64 / x_a.pixels() as f64;
    Ok(AugmentedExample {
        image,
        y_a: y_a.to_vec(),
        y_b: y_b.to_vec(),
        lambda_pixel,
    })
}

pub fn cutmix<T: Real, R: Rng + ?Sized>(
    x_a: &Image<T>,
    x_b: &Image<T>,
    y_a: &[T],
    y_b: &[T],
    rng: &mut R,
) -> Result<AugmentedExample<T>> {
    let rect = sample_cutmix_rect(rng, x_a.height, x_a.width);
    cutmix_with_rect(x_a, x_b, y_a, y_b, rect)
}

/// Per-example pixel pipeline applied during training.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PixelAugment {
    #[default]
    None,
    /// Pad-4 random crop plus horizontal mirroring.
    CropFlip,
    /// Crop-flip followed by Cutout of the given size.
    Cutout { size: usize },
    /// Crop-flip followed by batchwise Mixup with `lambda ~ U[0, 1]`.
    Mixup,
    /// Crop-flip followed by batchwise CutMix.
    CutMix,
}

pub const TRANSLATE_PAD: usize = 4;

impl PixelAugment {
    fn translates(&self) -> bool {
        !matches!(self, PixelAugment::None)
    }

    /// Label-preserving part, applied to each raw image.
    pub fn apply_u8<R: Rng + ?Sized>(&self, img: &Image<u8>, rng: &mut R) -> Image<u8> {
        if !self.translates() {
            return img.clone();
        }
        let moved = pad_crop(img, TRANSLATE_PAD, rng);
        hflip(&moved, 0.5, rng)
    }

    /// Parts that act on the standardized batch: Cutout and the label-mixing
    /// methods. `targets` holds one probability row per instance.
    pub fn apply_batch<T: Real, R: Rng + ?Sized>(
        &self,
        x: &mut Tensor4<T>,
        targets: &mut Tensor4<T>,
        rng: &mut R,
    ) -> Result<()> {
        let s = x.shape();
        if s.c != CHANNELS {
            return Err(Error::invalid("pixel augmentation", format!("expected 3 channels, got {}", s.c)));
        }
        let image = |x: &Tensor4<T>, n: usize| Image::new(s.h, s.w, x.instance(n).to_vec());
        match *self {
            PixelAugment::None | PixelAugment::CropFlip => {}
            PixelAugment::Cutout { size } => {
                for n in 0..s.n {
                    let out = cutout(&image(x, n), size, rng);
                    x.instance_mut(n).copy_from_slice(&out.data);
                }
            }
            PixelAugment::Mixup | PixelAugment::CutMix => {
                let perm = crate::moex::sample_permutation(rng, s.n);
                let lambda: f64 = rng.random();
                let rect = sample_cutmix_rect(rng, s.h, s.w);
                let source = x.clone();
                let rows = targets.clone();
                for n in 0..s.n {
                    let (xa, xb) = (image(&source, n), image(&source, perm[n]));
                    let (ya, yb) = (rows.instance(n), rows.instance(perm[n]));
                    let ex = if *self == PixelAugment::Mixup {
                        mixup(&xa, &xb, ya, yb, lambda)?
                    } else {
                        cutmix_with_rect(&xa, &xb, ya, yb, rect)?
                    };
                    x.instance_mut(n).copy_from_slice(&ex.image.data);
                    targets.instance_mut(n).copy_from_slice(&ex.target());
                }
            }
        }
        Ok(())
    }
}
