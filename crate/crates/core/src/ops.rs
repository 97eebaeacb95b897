//! Forward and adjoint kernels behind the differentiable graph.

use crate::error::{Error, Result};
use crate::tensor::{gemm, Axes, Real, Shape4, Tensor4};

/// Geometry of a 2-D cross-correlation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub input: Shape4,
    pub kernel: Shape4,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeometry {
    pub fn new(input: Shape4, kernel: Shape4, stride: usize, pad: usize) -> Result<Self> {
        if stride == 0 {
            return Err(Error::invalid("conv2d", "stride must be at least 1"));
        }
        if kernel.c != input.c {
            return Err(Error::shape("conv2d", input, kernel));
        }
        let (ph, pw) = (input.h + 2 * pad, input.w + 2 * pad);
        if kernel.h == 0 || kernel.w == 0 || ph < kernel.h || pw < kernel.w {
            return Err(Error::shape("conv2d", input, kernel));
        }
        Ok(ConvGeometry {
            input,
            kernel,
            stride,
            pad,
            out_h: (ph - kernel.h) / stride + 1,
            out_w: (pw - kernel.w) / stride + 1,
        })
    }

    pub fn output(&self) -> Shape4 {
        Shape4::new(self.input.n, self.kernel.n, self.out_h, self.out_w)
    }

    fn patch_len(&self) -> usize {
        self.kernel.c * self.kernel.h * self.kernel.w
    }

    fn positions(&self) -> usize {
        self.out_h * self.out_w
    }

    fn is_pointwise(&self) -> bool {
        self.kernel.h == 1 && self.kernel.w == 1 && self.stride == 1 && self.pad == 0
    }

    /// Unfold one instance into a `(Cin*kh*kw) x (Ho*Wo)` matrix.
    fn im2col<T: Real>(&self, x: &[T], cols: &mut [T]) {
        let (h_in, w_in) = (self.input.h as isize, self.input.w as isize);
        let (kh, kw) = (self.kernel.h, self.kernel.w);
        let p = self.positions();
        let pad = self.pad as isize;
        let stride = self.stride as isize;
        for ci in 0..self.kernel.c {
            let plane = &x[ci * self.input.h * self.input.w..][..self.input.h * self.input.w];
            for ki in 0..kh {
                for kj in 0..kw {
                    let row = &mut cols[((ci * kh + ki) * kw + kj) * p..][..p];
                    for oh in 0..self.out_h {
                        let ih = oh as isize * stride - pad + ki as isize;
                        let dst = &mut row[oh * self.out_w..][..self.out_w];
                        if ih < 0 || ih >= h_in {
                            dst.fill(T::zero());
                            continue;
                        }
                        let src = &plane[ih as usize * self.input.w..][..self.input.w];
                        for (ow, d) in dst.iter_mut().enumerate() {
                            let iw = ow as isize * stride - pad + kj as isize;
                            *d = if iw < 0 || iw >= w_in {
                                T::zero()
                            } else {
                                src[iw as usize]
                            };
                        }
                    }
                }
            }
        }
    }

    /// Fold a column matrix back, accumulating into `dx`.
    fn col2im<T: Real>(&self, cols: &[T], dx: &mut [T]) {
        let (h_in, w_in) = (self.input.h as isize, self.input.w as isize);
        let (kh, kw) = (self.kernel.h, self.kernel.w);
        let p = self.positions();
        let pad = self.pad as isize;
        let stride = self.stride as isize;
        for ci in 0..self.kernel.c {
            let plane = &mut dx[ci * self.input.h * self.input.w..][..self.input.h * self.input.w];
            for ki in 0..kh {
                for kj in 0..kw {
                    let row = &cols[((ci * kh + ki) * kw + kj) * p..][..p];
                    for oh in 0..self.out_h {
                        let ih = oh as isize * stride - pad + ki as isize;
                        if ih < 0 || ih >= h_in {
                            continue;
                        }
                        let dst = &mut plane[ih as usize * self.input.w..][..self.input.w];
                        for (ow, &g) in row[oh * self.out_w..][..self.out_w].iter().enumerate() {
                            let iw = ow as isize * stride - pad + kj as isize;
                            if iw >= 0 && iw < w_in {
                                dst[iw as usize] = dst[iw as usize] + g;
                            }
                        }
                    }
                }
            }
        }
    }
}

fn check_bias<T: Real>(bias: &Tensor4<T>, channels: usize) -> Result<()> {
    if bias.len() != channels {
        return Err(Error::shape(
            "conv2d bias",
            bias.shape(),
            Shape4::new(1, channels, 1, 1),
        ));
    }
    Ok(())
}

/// Cross-correlation of `x` with `w` (`Cout, Cin, kh, kw`), no kernel flip.
pub fn conv2d_forward<T: Real>(
    x: &Tensor4<T>,
    w: &Tensor4<T>,
    bias: Option<&Tensor4<T>>,
    stride: usize,
    pad: usize,
) -> Result<Tensor4<T>> {
    let geo = ConvGeometry::new(x.shape(), w.shape(), stride, pad)?;
    if let Some(b) = bias {
        check_bias(b, geo.kernel.n)?;
    }
    let out_shape = geo.output();
    let mut out = Tensor4::zeros(out_shape);
    let (k, p, cout) = (geo.patch_len(), geo.positions(), geo.kernel.n);
    let mut cols = if geo.is_pointwise() { Vec::new() } else { vec![T::zero(); k * p] };
    for n in 0..geo.input.n {
        let xs = x.instance(n);
        let cols_ref: &[T] = if geo.is_pointwise() {
            xs
        } else {
            geo.im2col(xs, &mut cols);
            &cols
        };
        let dst = out.instance_mut(n);
        gemm(cout, p, k, T::one(), w.data(), false, cols_ref, false, T::zero(), dst);
        if let Some(b) = bias {
            for (co, row) in dst.chunks_mut(p).enumerate() {
                let bv = b.data()[co];
                row.iter_mut().for_each(|v| *v = *v + bv);
            }
        }
    }
    Ok(out)
}

/// Gradients of a convolution: `(dx, dw, db)`; `dx` only when requested.
pub fn conv2d_backward<T: Real>(
    x: &Tensor4<T>,
    w: &Tensor4<T>,
    dy: &Tensor4<T>,
    stride: usize,
    pad: usize,
    need_dx: bool,
) -> Result<(Option<Tensor4<T>>, Tensor4<T>, Tensor4<T>)> {
    let geo = ConvGeometry::new(x.shape(), w.shape(), stride, pad)?;
    if dy.shape() != geo.output() {
        return Err(Error::shape("conv2d backward", dy.shape(), geo.output()));
    }
    let (k, p, cout) = (geo.patch_len(), geo.positions(), geo.kernel.n);
    let mut dw = Tensor4::zeros(w.shape());
    let mut db = Tensor4::zeros(Shape4::new(1, cout, 1, 1));
    let mut dx = need_dx.then(|| Tensor4::zeros(x.shape()));
    let mut cols = vec![T::zero(); k * p];
    let mut dcols = vec![T::zero(); k * p];
    for n in 0..geo.input.n {
        let xs = x.instance(n);
        let dys = dy.instance(n);
        let cols_ref: &[T] = if geo.is_pointwise() {
            xs
        } else {
            geo.im2col(xs, &mut cols);
            &cols
        };
        gemm(cout, k, p, T::one(), dys, false, cols_ref, true, T::one(), dw.data_mut());
        for (co, row) in dys.chunks(p).enumerate() {
            let s: T = row.iter().copied().sum();
            db.data_mut()[co] = db.data()[co] + s;
        }
        if let Some(dx) = dx.as_mut() {
            if geo.is_pointwise() {
                gemm(k, p, cout, T::one(), w.data(), true, dys, false, T::one(), dx.instance_mut(n));
            } else {
                gemm(k, p, cout, T::one(), w.data(), true, dys, false, T::zero(), &mut dcols);
                geo.col2im(&dcols, dx.instance_mut(n));
            }
        }
    }
    Ok((dx, dw, db))
}

/// Per-channel batch normalization results kept for the backward pass.
#[derive(Clone, Debug)]
pub struct BatchNormSaved<T> {
    pub normalized: Tensor4<T>,
    pub inv_std: Vec<T>,
    pub batch_mean: Vec<T>,
    /// Population variance of the batch.
    pub batch_var: Vec<T>,
}

fn channel_view(shape: Shape4) -> (usize, usize, usize) {
    (shape.n, shape.c, shape.h * shape.w)
}

/// Normalize per channel over `(N, H, W)`. With `stats = Some((mean, var))`
/// the given statistics are used instead of batch statistics.
pub fn batchnorm_forward<T: Real>(
    x: &Tensor4<T>,
    gamma: &Tensor4<T>,
    beta: &Tensor4<T>,
    stats: Option<(&[T], &[T])>,
    eps: T,
) -> Result<(Tensor4<T>, BatchNormSaved<T>)> {
    let (n, c, hw) = channel_view(x.shape());
    let affine_shape = Shape4::new(1, c, 1, 1);
    for t in [gamma, beta] {
        if t.len() != c {
            return Err(Error::shape("batchnorm", x.shape(), t.shape()));
        }
    }
    let (mean, var) = match stats {
        Some((m, v)) => {
            if m.len() != c || v.len() != c {
                return Err(Error::shape("batchnorm running stats", x.shape(), affine_shape));
            }
            (m.to_vec(), v.to_vec())
        }
        None => {
            if n * hw < 2 {
                return Err(Error::invalid(
                    "batchnorm",
                    format!("training mode needs at least 2 values per channel, got {}", n * hw),
                ));
            }
            let m = x.reduce_mean(Axes::NHW);
            let centered = x.broadcast_zip(&m, |a, b| (a - b) * (a - b))?;
            let v = centered.reduce_mean(Axes::NHW);
            (m.into_vec(), v.into_vec())
        }
    };
    let inv_std: Vec<T> = var.iter().map(|&v| (v + eps).sqrt().recip()).collect();
    let mut normalized = Tensor4::zeros(x.shape());
    let mut y = Tensor4::zeros(x.shape());
    for b in 0..n {
        for ch in 0..c {
            let off = (b * c + ch) * hw;
            let (g, bt, mu, is) = (gamma.data()[ch], beta.data()[ch], mean[ch], inv_std[ch]);
            for i in off..off + hw {
                let xh = (x.data()[i] - mu) * is;
                normalized.data_mut()[i] = xh;
                y.data_mut()[i] = g * xh + bt;
            }
        }
    }
    Ok((
        y,
        BatchNormSaved {
            normalized,
            inv_std,
            batch_mean: mean,
            batch_var: var,
        },
    ))
}

/// Adjoint of [`batchnorm_forward`]. `batch_stats` selects the training-mode
/// formula, which also differentiates through the batch mean and variance.
pub fn batchnorm_backward<T: Real>(
    dy: &Tensor4<T>,
    gamma: &Tensor4<T>,
    saved: &BatchNormSaved<T>,
    batch_stats: bool,
) -> (Tensor4<T>, Tensor4<T>, Tensor4<T>) {
    let (n, c, hw) = channel_view(dy.shape());
    let m = T::from_usize(n * hw).unwrap();
    let mut dgamma = Tensor4::zeros(Shape4::new(1, c, 1, 1));
    let mut dbeta = Tensor4::zeros(Shape4::new(1, c, 1, 1));
    let xh = saved.normalized.data();
    for b in 0..n {
        for ch in 0..c {
            let off = (b * c + ch) * hw;
            let mut sg = T::zero();
            let mut sb = T::zero();
            for i in off..off + hw {
                sg = sg + dy.data()[i] * xh[i];
                sb = sb + dy.data()[i];
            }
            dgamma.data_mut()[ch] = dgamma.data()[ch] + sg;
            dbeta.data_mut()[ch] = dbeta.data()[ch] + sb;
        }
    }
    let mut dx = Tensor4::zeros(dy.shape());
    for b in 0..n {
        for ch in 0..c {
            let off = (b * c + ch) * hw;
            let scale = gamma.data()[ch] * saved.inv_std[ch];
            for i in off..off + hw {
                dx.data_mut()[i] = if batch_stats {
                    scale / m * (m * dy.data()[i] - dbeta.data()[ch] - xh[i] * dgamma.data()[ch])
                } else {
                    scale * dy.data()[i]
                };
            }
        }
    }
    (dx, dgamma, dbeta)
}

/// Validate that each row of a `(N, K)` target is a probability vector.
pub fn check_target_rows<T: Real>(target: &Tensor4<T>) -> Result<()> {
    let k = target.shape().instance_len();
    for (row, vals) in target.data().chunks(k.max(1)).enumerate() {
        if let Some(v) = vals.iter().find(|v| !(v.as_f64() >= 0.0)) {
            return Err(Error::InvalidTarget {
                row,
                reason: format!("negative or NaN entry {v}"),
            });
        }
        let s: f64 = vals.iter().map(|v| v.as_f64()).sum();
        if (s - 1.0).abs() > 1e-6 {
            return Err(Error::InvalidTarget {
                row,
                reason: format!("sums to {s}"),
            });
        }
    }
    Ok(())
}

/// Mean over rows of `-sum_k target_k * log softmax(logits)_k`, together with
/// the softmax probabilities. Uses max subtraction, and `ln_1p` for the
/// dominant term so saturated rows keep full precision.
pub fn softmax_cross_entropy<T: Real>(
    logits: &Tensor4<T>,
    target: &Tensor4<T>,
) -> Result<(T, Tensor4<T>)> {
    if logits.shape() != target.shape() {
        return Err(Error::shape("softmax_cross_entropy", logits.shape(), target.shape()));
    }
    check_target_rows(target)?;
    let n = logits.shape().n;
    let k = logits.shape().instance_len();
    let mut probs = Tensor4::zeros(logits.shape());
    let mut total = T::zero();
    for r in 0..n {
        let z = logits.instance(r);
        let t = target.instance(r);
        let (arg, zmax) = z
            .iter()
            .enumerate()
            .fold((0, T::neg_infinity()), |(ai, am), (i, &v)| if v > am { (i, v) } else { (ai, am) });
        let rest: T = z
            .iter()
            .enumerate()
            .filter(|(i, _)| *i != arg)
            .map(|(_, &v)| (v - zmax).exp())
            .sum();
        let log_norm = rest.ln_1p();
        let denom = T::one() + rest;
        let mut row_loss = T::zero();
        let p = probs.instance_mut(r);
        for i in 0..k {
            let shifted = z[i] - zmax;
            p[i] = shifted.exp() / denom;
            if t[i] != T::zero() {
                row_loss = row_loss + t[i] * (log_norm - shifted);
            }
        }
        total = total + row_loss;
    }
    Ok((total / T::from_usize(n.max(1)).unwrap(), probs))
}

/// `(N, D) x (D, K) + (K)`.
pub fn affine_forward<T: Real>(
    x: &Tensor4<T>,
    w: &Tensor4<T>,
    b: &Tensor4<T>,
) -> Result<Tensor4<T>> {
    let (n, d) = (x.shape().n, x.shape().instance_len());
    let ws = w.shape();
    if ws.n != d || ws.h != 1 || ws.w != 1 {
        return Err(Error::shape("affine", x.shape(), ws));
    }
    let k = ws.c;
    if b.len() != k {
        return Err(Error::shape("affine bias", ws, b.shape()));
    }
    let mut out = Tensor4::zeros(Shape4::matrix(n, k));
    for r in 0..n {
        out.instance_mut(r).copy_from_slice(b.data());
    }
    gemm(n, k, d, T::one(), x.data(), false, w.data(), false, T::one(), out.data_mut());
    Ok(out)
}

pub fn global_avg_pool<T: Real>(x: &Tensor4<T>) -> Tensor4<T> {
    x.reduce_mean(Axes::HW)
}
