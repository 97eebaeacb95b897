//! Tape-based reverse-mode differentiation over [`Tensor4`] values.
//!
//! A [`Graph`] records every operation in creation order, so the node list is
//! already topologically sorted. [`Graph::backward`] may be called once per
//! graph; differentiating again requires re-running the forward computation
//! into a fresh graph.

use crate::error::{Error, Result};
use crate::ops::{self, BatchNormSaved};
use crate::tensor::{Axes, Real, Shape4, Tensor4};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Batch statistics observed by a training-mode batch norm.
#[derive(Clone, Debug)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    /// Population variance over `(N, H, W)`.
    pub var: Vec<T>,
    /// Number of values per channel the statistics were computed from.
    pub count: usize,
}

/// Batch norm mode.
#[derive(Clone, Copy, Debug)]
pub enum BnMode<'a, T> {
    /// Normalize with batch statistics.
    Train,
    /// Normalize with the supplied `(mean, var)`.
    Eval { mean: &'a [T], var: &'a [T] },
}

enum Op<T> {
    Leaf,
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    },
    Relu(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    Sqrt(Var),
    Sum(Var),
    ReduceMean(Var, Axes),
    Reshape(Var),
    GatherBatch(Var, Vec<usize>),
    GlobalAvgPool(Var),
    Affine {
        x: Var,
        w: Var,
        b: Var,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        saved: BatchNormSaved<T>,
        batch_stats: bool,
    },
    SoftmaxCrossEntropy {
        logits: Var,
        target: Tensor4<T>,
        probs: Tensor4<T>,
    },
    MomentStd {
        x: Var,
        axes: Axes,
        centered: bool,
    },
    ConcatChannels(Vec<Var>),
}

struct Node<T> {
    value: Tensor4<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Gradients produced by [`Graph::backward`], one per reachable leaf.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor4<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor4<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor4<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

/// Computation record.
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    consumed: bool,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            consumed: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor4<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> Shape4 {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor4<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Trainable leaf; receives a gradient.
    pub fn param(&mut self, value: Tensor4<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Constant leaf; never receives a gradient.
    pub fn constant(&mut self, value: Tensor4<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let out = ops::conv2d_forward(
            self.value(x),
            self.value(w),
            b.map(|b| self.value(b)),
            stride,
            pad,
        )?;
        let ng = self.needs(x) || self.needs(w) || b.is_some_and(|b| self.needs(b));
        Ok(self.push(out, Op::Conv2d { x, w, b, stride, pad }, ng))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v.max(T::zero()));
        let ng = self.needs(x);
        self.push(out, Op::Relu(x), ng)
    }

    fn binary(&mut self, a: Var, b: Var, op: Op<T>, f: impl Fn(T, T) -> T) -> Result<Var> {
        let out = self.value(a).broadcast_zip(self.value(b), f)?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(out, op, ng))
    }

    /// `a + b`, with `b` broadcast onto `a`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Div(a, b), |x, y| x / y)
    }

    pub fn scale(&mut self, x: Var, s: T) -> Var {
        let out = self.value(x).scale(s);
        let ng = self.needs(x);
        self.push(out, Op::Scale(x, s), ng)
    }

    pub fn add_scalar(&mut self, x: Var, s: T) -> Var {
        let out = self.value(x).map(|v| v + s);
        let ng = self.needs(x);
        self.push(out, Op::AddScalar(x), ng)
    }

    pub fn sqrt(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v.sqrt());
        let ng = self.needs(x);
        self.push(out, Op::Sqrt(x), ng)
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&mut self, x: Var) -> Var {
        let out = Tensor4::scalar(self.value(x).sum());
        let ng = self.needs(x);
        self.push(out, Op::Sum(x), ng)
    }

    pub fn reduce_mean(&mut self, x: Var, axes: Axes) -> Var {
        let out = self.value(x).reduce_mean(axes);
        let ng = self.needs(x);
        self.push(out, Op::ReduceMean(x, axes), ng)
    }

    pub fn reshape(&mut self, x: Var, shape: Shape4) -> Result<Var> {
        let out = self.value(x).reshape(shape)?;
        let ng = self.needs(x);
        Ok(self.push(out, Op::Reshape(x), ng))
    }

    /// Output instance `i` is input instance `perm[i]`.
    pub fn gather_batch(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let out = self.value(x).gather_batch(perm)?;
        let ng = self.needs(x);
        Ok(self.push(out, Op::GatherBatch(x, perm.to_vec()), ng))
    }

    pub fn global_avg_pool(&mut self, x: Var) -> Var {
        let out = ops::global_avg_pool(self.value(x));
        let ng = self.needs(x);
        self.push(out, Op::GlobalAvgPool(x), ng)
    }

    /// `x` is read as `(N, D)` over its instance elements; `w` is `(D, K, 1, 1)`.
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let out = ops::affine_forward(self.value(x), self.value(w), self.value(b))?;
        let ng = self.needs(x) || self.needs(w) || self.needs(b);
        Ok(self.push(out, Op::Affine { x, w, b }, ng))
    }

    /// Inter-instance (batch) normalization with affine `gamma`, `beta` of
    /// shape `(1, C, 1, 1)`. In training mode the observed batch statistics
    /// are returned so the caller can maintain running averages.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mode: BnMode<'_, T>,
        eps: T,
    ) -> Result<(Var, Option<BatchStats<T>>)> {
        let stats = match mode {
            BnMode::Train => None,
            BnMode::Eval { mean, var } => Some((mean, var)),
        };
        let (y, saved) = ops::batchnorm_forward(
            self.value(x),
            self.value(gamma),
            self.value(beta),
            stats,
            eps,
        )?;
        let batch_stats = matches!(mode, BnMode::Train);
        let s = self.shape(x);
        let observed = batch_stats.then(|| BatchStats {
            mean: saved.batch_mean.clone(),
            var: saved.batch_var.clone(),
            count: s.n * s.h * s.w,
        });
        let ng = self.needs(x) || self.needs(gamma) || self.needs(beta);
        let v = self.push(
            y,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                saved,
                batch_stats,
            },
            ng,
        );
        Ok((v, observed))
    }

    /// Mean softmax cross entropy of `(N, K)` logits against constant
    /// probability rows.
    pub fn softmax_cross_entropy(&mut self, logits: Var, target: &Tensor4<T>) -> Result<Var> {
        let (loss, probs) = ops::softmax_cross_entropy(self.value(logits), target)?;
        let ng = self.needs(logits);
        Ok(self.push(
            Tensor4::scalar(loss),
            Op::SoftmaxCrossEntropy {
                logits,
                target: target.clone(),
                probs,
            },
            ng,
        ))
    }

    /// `sqrt(mean_axes((x - m)^2) + eps)` where `m` is the mean over `axes`
    /// (`centered`) or zero.
    pub fn moment_std(&mut self, x: Var, axes: Axes, eps: T, centered: bool) -> Result<Var> {
        let xv = self.value(x);
        let sq = if centered {
            let m = xv.reduce_mean(axes);
            xv.broadcast_zip(&m, |a, b| (a - b) * (a - b))?
        } else {
            xv.map(|a| a * a)
        };
        let out = sq.reduce_mean(axes).map(|v| (v + eps).sqrt());
        let ng = self.needs(x);
        Ok(self.push(out, Op::MomentStd { x, axes, centered }, ng))
    }

    /// Stack inputs along the channel axis.
    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .map(|&v| self.shape(v))
            .ok_or_else(|| Error::invalid("concat_channels", "no inputs"))?;
        let mut channels = 0;
        for &p in parts {
            let s = self.shape(p);
            if (s.n, s.h, s.w) != (first.n, first.h, first.w) {
                return Err(Error::shape("concat_channels", first, s));
            }
            channels += s.c;
        }
        let out_shape = Shape4::new(first.n, channels, first.h, first.w);
        let mut data = Vec::with_capacity(out_shape.numel());
        for n in 0..first.n {
            for &p in parts {
                data.extend_from_slice(self.value(p).instance(n));
            }
        }
        let out = Tensor4::new(out_shape, data)?;
        let ng = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(out, Op::ConcatChannels(parts.to_vec()), ng))
    }

    /// Reverse pass from a scalar root. Returns gradients for every node that
    /// depends on a trainable leaf; intermediate gradients are released as
    /// soon as they have been propagated, so only leaf gradients remain.
    pub fn backward(&mut self, root: Var) -> Result<Gradients<T>> {
        if self.consumed {
            return Err(Error::BackwardConsumed);
        }
        let rs = self.shape(root);
        if !rs.is_scalar() {
            return Err(Error::NonScalarRoot(rs));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Tensor4<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor4::ones(rs));
        for i in (0..=root.0).rev() {
            if !self.nodes[i].needs_grad || matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads)?;
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor4<T>>], v: Var, g: Tensor4<T>) -> Result<()> {
        if !self.needs(v) {
            return Ok(());
        }
        match &mut grads[v.0] {
            Some(acc) => acc.axpy(T::one(), &g)?,
            slot @ None => *slot = Some(g),
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &Tensor4<T>, grads: &mut [Option<Tensor4<T>>]) -> Result<()> {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { x, w, b, stride, pad } => {
                let (dx, dw, db) = ops::conv2d_backward(
                    self.value(*x),
                    self.value(*w),
                    g,
                    *stride,
                    *pad,
                    self.needs(*x),
                )?;
                if let Some(dx) = dx {
                    self.accumulate(grads, *x, dx)?;
                }
                self.accumulate(grads, *w, dw)?;
                if let Some(b) = b {
                    let db = db.into_shape(self.shape(*b))?;
                    self.accumulate(grads, *b, db)?;
                }
            }
            Op::Relu(x) => {
                let dx = self.value(*x).zip_map(g, |v, gv| if v > T::zero() { gv } else { T::zero() })?;
                self.accumulate(grads, *x, dx)?;
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone())?;
                if self.needs(*b) {
                    let db = g.sum_to_shape(self.shape(*b))?;
                    self.accumulate(grads, *b, db)?;
                }
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone())?;
                if self.needs(*b) {
                    let db = g.sum_to_shape(self.shape(*b))?.scale(-T::one());
                    self.accumulate(grads, *b, db)?;
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.needs(*a) {
                    let da = g.broadcast_zip(bv, |gv, y| gv * y)?;
                    self.accumulate(grads, *a, da)?;
                }
                if self.needs(*b) {
                    let db = g.zip_map(av, |gv, x| gv * x)?.sum_to_shape(bv.shape())?;
                    self.accumulate(grads, *b, db)?;
                }
            }
            Op::Div(a, b) => {
                let bv = self.value(*b);
                if self.needs(*a) {
                    let da = g.broadcast_zip(bv, |gv, y| gv / y)?;
                    self.accumulate(grads, *a, da)?;
                }
                if self.needs(*b) {
                    // d(a/b)/db = -(a/b)/b
                    let q = g.zip_map(&node.value, |gv, o| gv * o)?;
                    let db = q
                        .broadcast_zip(bv, |t, y| -t / y)?
                        .sum_to_shape(bv.shape())?;
                    self.accumulate(grads, *b, db)?;
                }
            }
            Op::Scale(x, s) => {
                self.accumulate(grads, *x, g.scale(*s))?;
            }
            Op::AddScalar(x) => {
                self.accumulate(grads, *x, g.clone())?;
            }
            Op::Sqrt(x) => {
                let two = T::lit(2.0);
                let dx = g.zip_map(&node.value, |gv, o| gv / (two * o))?;
                self.accumulate(grads, *x, dx)?;
            }
            Op::Sum(x) => {
                let dx = Tensor4::full(self.shape(*x), g.item());
                self.accumulate(grads, *x, dx)?;
            }
            Op::ReduceMean(x, axes) => {
                let s = self.shape(*x);
                let count = T::from_usize(axes.count(s)).unwrap();
                let dx = Tensor4::zeros(s).broadcast_zip(g, |_, gv| gv / count)?;
                self.accumulate(grads, *x, dx)?;
            }
            Op::Reshape(x) => {
                let dx = g.reshape(self.shape(*x))?;
                self.accumulate(grads, *x, dx)?;
            }
            Op::GatherBatch(x, perm) => {
                let dx = g.scatter_add_batch(perm)?;
                self.accumulate(grads, *x, dx)?;
            }
            Op::GlobalAvgPool(x) => {
                let s = self.shape(*x);
                let count = T::from_usize(s.h * s.w).unwrap();
                let dx = Tensor4::zeros(s).broadcast_zip(g, |_, gv| gv / count)?;
                self.accumulate(grads, *x, dx)?;
            }
            Op::Affine { x, w, b } => {
                let (xv, wv) = (self.value(*x), self.value(*w));
                let (n, d) = (xv.shape().n, xv.shape().instance_len());
                let k = wv.shape().c;
                if self.needs(*x) {
                    let mut dx = Tensor4::zeros(xv.shape());
                    crate::tensor::gemm(n, d, k, T::one(), g.data(), false, wv.data(), true, T::zero(), dx.data_mut());
                    self.accumulate(grads, *x, dx)?;
                }
                if self.needs(*w) {
                    let mut dw = Tensor4::zeros(wv.shape());
                    crate::tensor::gemm(d, k, n, T::one(), xv.data(), true, g.data(), false, T::zero(), dw.data_mut());
                    self.accumulate(grads, *w, dw)?;
                }
                if self.needs(*b) {
                    let db = g.sum_to_shape(Shape4::matrix(1, k))?.into_shape(self.shape(*b))?;
                    self.accumulate(grads, *b, db)?;
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                saved,
                batch_stats,
            } => {
                let gv = self.value(*gamma);
                let (dx, dgamma, dbeta) = ops::batchnorm_backward(g, gv, saved, *batch_stats);
                self.accumulate(grads, *x, dx)?;
                self.accumulate(grads, *gamma, dgamma.into_shape(gv.shape())?)?;
                let bs = self.shape(*beta);
                self.accumulate(grads, *beta, dbeta.into_shape(bs)?)?;
            }
            Op::SoftmaxCrossEntropy {
                logits,
                target,
                probs,
            } => {
                let n = T::from_usize(probs.shape().n.max(1)).unwrap();
                let scale = g.item() / n;
                let dl = probs.zip_map(target, |p, t| (p - t) * scale)?;
                self.accumulate(grads, *logits, dl)?;
            }
            Op::ConcatChannels(parts) => {
                let hw = g.shape().h * g.shape().w;
                let mut offset = 0;
                for &p in parts {
                    let s = self.shape(p);
                    let len = s.c * hw;
                    if self.needs(p) {
                        let mut dp = Vec::with_capacity(s.numel());
                        for n in 0..s.n {
                            dp.extend_from_slice(&g.instance(n)[offset..offset + len]);
                        }
                        self.accumulate(grads, p, Tensor4::new(s, dp)?)?;
                    }
                    offset += len;
                }
            }
            Op::MomentStd { x, axes, centered } => {
                // d sigma / d x_i = (x_i - m) / (count * sigma); the mean's own
                // dependence on x cancels because the centered values sum to 0.
                let xv = self.value(*x);
                let count = T::from_usize(axes.count(xv.shape())).unwrap();
                let coeff = g.zip_map(&node.value, |gv, s| gv / (count * s))?;
                let centered_x = if *centered {
                    xv.broadcast_zip(&xv.reduce_mean(*axes), |a, m| a - m)?
                } else {
                    xv.clone()
                };
                let dx = centered_x.broadcast_zip(&coeff, |c, k| c * k)?;
                self.accumulate(grads, *x, dx)?;
            }
        }
        Ok(())
    }
}
