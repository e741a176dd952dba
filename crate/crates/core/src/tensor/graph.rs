use std::collections::HashMap;

use super::kernels::{
    batch_to_channel_major, channel_major_to_batch, col2im, gemm, im2col, ConvGeom, Mat,
};
use super::{Float, Result, Tensor, TensorError};

/// Batch-norm variance epsilon.
pub const BN_EPS: f64 = 1e-5;
/// Weight of the previous running statistic in the exponential average.
pub const BN_MOMENTUM: f64 = 0.9;

/// Handle to a node recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Per-channel running mean and variance for batch normalization.
#[derive(Debug, Clone, PartialEq)]
pub struct RunningStats<T> {
    pub mean: Tensor<T>,
    pub var: Tensor<T>,
}

impl<T: Float> RunningStats<T> {
    pub fn new(channels: usize) -> Self {
        Self {
            mean: Tensor::zeros(&[channels]),
            var: Tensor::full(&[channels], T::one()),
        }
    }

    pub fn channels(&self) -> usize {
        self.mean.numel()
    }

    /// `running = m * running + (1 - m) * batch`, with the unbiased batch variance.
    pub fn update(&mut self, moments: &BatchMoments<T>) {
        let m = T::of(BN_MOMENTUM);
        let one_m = T::one() - m;
        for (r, &b) in self.mean.data_mut().iter_mut().zip(&moments.mean) {
            *r = m * *r + one_m * b;
        }
        for (r, &b) in self.var.data_mut().iter_mut().zip(&moments.unbiased_var) {
            *r = m * *r + one_m * b;
        }
    }
}

/// Batch statistics measured by a train-mode batch norm.
#[derive(Debug, Clone)]
pub struct BatchMoments<T> {
    pub mean: Vec<T>,
    pub unbiased_var: Vec<T>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BnMode {
    /// Normalize with batch statistics; fold them into the running stats if `track_stats`.
    Train { track_stats: bool },
    /// Normalize with the running statistics.
    Eval,
}

enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Sum(Var),
    Mean(Var),
    L1(Var),
    Sigmoid(Var),
    Log(Var),
    Softplus(Var),
    LeakyRelu(Var, T),
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
        cout: usize,
        cols: Vec<T>,
    },
    ConvTranspose2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        // Geometry of the equivalent forward convolution from output back to input.
        geom: ConvGeom,
        cin: usize,
        x_cm: Vec<T>,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
        train: bool,
    },
    Concat(Var, Var),
    SliceChannels {
        x: Var,
        start: usize,
    },
    GlobalAvgPool(Var),
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Reshape(Var),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Reverse-mode tape. Nodes are appended in evaluation order, so the list is
/// always topologically sorted and backward is a single reverse sweep.
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    consumed: bool,
}

impl<T: Float> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients of a scalar loss for every leaf that requires grad.
#[derive(Debug, Clone)]
pub struct Gradients<T> {
    grads: HashMap<Var, Tensor<T>>,
}

impl<T: Float> Gradients<T> {
    pub fn get(&self, var: Var) -> Option<&Tensor<T>> {
        self.grads.get(&var)
    }

    pub fn contains(&self, var: Var) -> bool {
        self.grads.contains_key(&var)
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn vars(&self) -> impl Iterator<Item = Var> + '_ {
        self.grads.keys().copied()
    }
}

fn shape4(t: &Tensor<impl Float>, op: &'static str) -> Result<[usize; 4]> {
    match *t.shape() {
        [n, c, h, w] => Ok([n, c, h, w]),
        _ => Err(TensorError::InvalidArgument {
            op,
            msg: format!("expected NCHW tensor, got shape {:?}", t.shape()),
        }),
    }
}

fn sigmoid<T: Float>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

fn softplus<T: Float>(x: T) -> T {
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}

fn accumulate<T: Float>(grads: &mut [Option<Vec<T>>], var: Var, contribution: Vec<T>) {
    match &mut grads[var.0] {
        Some(existing) => {
            for (e, c) in existing.iter_mut().zip(contribution) {
                *e += c;
            }
        }
        slot @ None => *slot = Some(contribution),
    }
}

impl<T: Float> Graph<T> {
    pub fn new() -> Self {
        Self {
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

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        debug_assert!(
            value.all_finite(),
            "non-finite value produced by node {}",
            self.nodes.len()
        );
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Records a leaf; it is trainable if the tensor was flagged `requires_grad`.
    pub fn leaf(&mut self, t: Tensor<T>) -> Var {
        let rg = t.requires_grad();
        self.push(t, Op::Leaf, rg)
    }

    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(t.with_requires_grad(false), Op::Leaf, false)
    }

    pub fn param(&mut self, t: Tensor<T>) -> Var {
        self.push(t.with_requires_grad(true), Op::Leaf, true)
    }

    /// A constant copy of `v`'s value, cut off from the tape.
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.nodes[v.0].value.clone();
        self.constant(t)
    }

    fn binary(&mut self, a: Var, b: Var, op: &'static str, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        self.value(a).zip_map(self.value(b), op, f)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary(a, b, "add", |x, y| x + y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary(a, b, "sub", |x, y| x - y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary(a, b, "mul", |x, y| x * y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let s = T::of(s);
        let out = self.value(a).map(|x| x * s);
        let rg = self.rg(&[a]);
        self.push(out, Op::Scale(a, s), rg)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s: T = self.value(a).data().iter().copied().sum();
        let rg = self.rg(&[a]);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let s: T = t.data().iter().copied().sum();
        let m = s / T::of(t.numel() as f64);
        let rg = self.rg(&[a]);
        self.push(Tensor::scalar(m), Op::Mean(a), rg)
    }

    /// Mean absolute value.
    pub fn l1(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let s: T = t.data().iter().map(|v| v.abs()).sum();
        let m = s / T::of(t.numel() as f64);
        let rg = self.rg(&[a]);
        self.push(Tensor::scalar(m), Op::L1(a), rg)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).map(sigmoid);
        let rg = self.rg(&[a]);
        self.push(out, Op::Sigmoid(a), rg)
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        if let Some((index, v)) = t.data().iter().enumerate().find(|(_, v)| **v <= T::zero()) {
            return Err(TensorError::NonPositiveLog {
                index,
                value: v.as_f64(),
            });
        }
        let out = t.map(|x| x.ln());
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::Log(a), rg))
    }

    /// `ln(1 + e^x)`, evaluated without overflow.
    pub fn softplus(&mut self, a: Var) -> Var {
        let out = self.value(a).map(softplus);
        let rg = self.rg(&[a]);
        self.push(out, Op::Softplus(a), rg)
    }

    /// `-ln(sigmoid(z))` in the stable form `softplus(-z)`.
    pub fn neg_log_sigmoid(&mut self, logits: Var) -> Var {
        let n = self.neg(logits);
        self.softplus(n)
    }

    /// `-ln(1 - sigmoid(z))` in the stable form `softplus(z)`.
    pub fn neg_log_one_minus_sigmoid(&mut self, logits: Var) -> Var {
        self.softplus(logits)
    }

    pub fn leaky_relu(&mut self, a: Var, alpha: f64) -> Result<Var> {
        if !(alpha > 0.0 && alpha < 1.0) {
            return Err(TensorError::InvalidArgument {
                op: "leaky_relu",
                msg: format!("alpha must lie in (0,1), got {alpha}"),
            });
        }
        let alpha = T::of(alpha);
        let out = self
            .value(a)
            .map(|x| if x > T::zero() { x } else { alpha * x });
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::LeakyRelu(a, alpha), rg))
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let [n, c, h, wd] = shape4(self.value(x), "conv2d")?;
        let [cout, cin, k, k2] = shape4(self.value(w), "conv2d")?;
        if cin != c {
            return Err(TensorError::ShapeMismatch {
                op: "conv2d",
                left: self.shape(x).to_vec(),
                right: self.shape(w).to_vec(),
            });
        }
        if k != k2 || stride == 0 {
            return Err(TensorError::InvalidArgument {
                op: "conv2d",
                msg: format!("need square kernel and stride > 0, got {k}x{k2} stride {stride}"),
            });
        }
        if h + 2 * pad < k || wd + 2 * pad < k {
            return Err(TensorError::InvalidArgument {
                op: "conv2d",
                msg: format!("non-positive output size for {h}x{wd} input, kernel {k}, padding {pad}"),
            });
        }
        if let Some(b) = b {
            if self.shape(b) != [cout] {
                return Err(TensorError::ShapeMismatch {
                    op: "conv2d bias",
                    left: self.shape(b).to_vec(),
                    right: vec![cout],
                });
            }
        }
        let geom = ConvGeom {
            n,
            c,
            h,
            w: wd,
            k,
            stride,
            pad,
            oh: (h + 2 * pad - k) / stride + 1,
            ow: (wd + 2 * pad - k) / stride + 1,
        };
        let cols = im2col(self.value(x).data(), &geom);
        let np = geom.col_cols();
        let mut out_cm = vec![T::zero(); cout * np];
        gemm(
            Mat::row_major(self.value(w).data(), cout, geom.col_rows()),
            Mat::row_major(&cols, geom.col_rows(), np),
            T::zero(),
            &mut out_cm,
        );
        let plane = geom.oh * geom.ow;
        let mut out = channel_major_to_batch(&out_cm, n, cout, plane);
        if let Some(b) = b {
            add_channel_bias(&mut out, self.value(b).data(), plane);
        }
        let value = Tensor::new(&[n, cout, geom.oh, geom.ow], out)?;
        let rg = self.rg(&[x, w]) || b.is_some_and(|b| self.requires_grad(b));
        Ok(self.push(value, Op::Conv2d { x, w, b, geom, cout, cols }, rg))
    }

    /// Fractional-stride convolution; `w` is laid out `[C_in, C_out, K, K]`.
    pub fn conv2d_transpose(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let [n, cin, h, wd] = shape4(self.value(x), "conv2d_transpose")?;
        let [wcin, cout, k, k2] = shape4(self.value(w), "conv2d_transpose")?;
        if wcin != cin {
            return Err(TensorError::ShapeMismatch {
                op: "conv2d_transpose",
                left: self.shape(x).to_vec(),
                right: self.shape(w).to_vec(),
            });
        }
        if k != k2 || stride == 0 {
            return Err(TensorError::InvalidArgument {
                op: "conv2d_transpose",
                msg: format!("need square kernel and stride > 0, got {k}x{k2} stride {stride}"),
            });
        }
        let out_h = ((h - 1) * stride + k) as isize - 2 * pad as isize;
        let out_w = ((wd - 1) * stride + k) as isize - 2 * pad as isize;
        if out_h <= 0 || out_w <= 0 {
            return Err(TensorError::InvalidArgument {
                op: "conv2d_transpose",
                msg: format!("non-positive output size for {h}x{wd} input, kernel {k}, padding {pad}"),
            });
        }
        if let Some(b) = b {
            if self.shape(b) != [cout] {
                return Err(TensorError::ShapeMismatch {
                    op: "conv2d_transpose bias",
                    left: self.shape(b).to_vec(),
                    right: vec![cout],
                });
            }
        }
        let geom = ConvGeom {
            n,
            c: cout,
            h: out_h as usize,
            w: out_w as usize,
            k,
            stride,
            pad,
            oh: h,
            ow: wd,
        };
        let np = geom.col_cols();
        let x_cm = batch_to_channel_major(self.value(x).data(), n, cin, h * wd);
        let mut cols = vec![T::zero(); geom.col_rows() * np];
        gemm(
            Mat::row_major(self.value(w).data(), cin, geom.col_rows()).t(),
            Mat::row_major(&x_cm, cin, np),
            T::zero(),
            &mut cols,
        );
        let mut out = col2im(&cols, &geom);
        if let Some(b) = b {
            add_channel_bias(&mut out, self.value(b).data(), geom.h * geom.w);
        }
        let value = Tensor::new(&[n, cout, geom.h, geom.w], out)?;
        let rg = self.rg(&[x, w]) || b.is_some_and(|b| self.requires_grad(b));
        Ok(self.push(value, Op::ConvTranspose2d { x, w, b, geom, cin, x_cm }, rg))
    }

    fn check_affine(&self, x: Var, gamma: Var, beta: Var) -> Result<[usize; 4]> {
        let dims = shape4(self.value(x), "batch_norm")?;
        for p in [gamma, beta] {
            if self.shape(p) != [dims[1]] {
                return Err(TensorError::ShapeMismatch {
                    op: "batch_norm",
                    left: self.shape(x).to_vec(),
                    right: self.shape(p).to_vec(),
                });
            }
        }
        Ok(dims)
    }

    /// Normalizes each channel by its batch statistics and returns them.
    pub fn batch_norm_train(&mut self, x: Var, gamma: Var, beta: Var) -> Result<(Var, BatchMoments<T>)> {
        let [n, c, h, w] = self.check_affine(x, gamma, beta)?;
        if n < 2 {
            return Err(TensorError::BatchTooSmall(n));
        }
        let plane = h * w;
        let count = T::of((n * plane) as f64);
        let eps = T::of(BN_EPS);
        let xv = self.value(x).data();
        let mut mean = vec![T::zero(); c];
        let mut var = vec![T::zero(); c];
        for ci in 0..c {
            let mut s = T::zero();
            for ni in 0..n {
                s += xv[(ni * c + ci) * plane..(ni * c + ci + 1) * plane]
                    .iter()
                    .copied()
                    .sum::<T>();
            }
            let m = s / count;
            let mut ss = T::zero();
            for ni in 0..n {
                for &v in &xv[(ni * c + ci) * plane..(ni * c + ci + 1) * plane] {
                    ss += (v - m) * (v - m);
                }
            }
            mean[ci] = m;
            var[ci] = ss / count;
        }
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let (out, xhat) = self.normalize(x, gamma, beta, &mean, &inv_std, [n, c, plane]);
        let rg = self.rg(&[x, gamma, beta]);
        let value = Tensor::new(&[n, c, h, w], out)?;
        let bessel = count / (count - T::one());
        let moments = BatchMoments {
            mean,
            unbiased_var: var.iter().map(|&v| v * bessel).collect(),
        };
        let var = self.push(
            value,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                train: true,
            },
            rg,
        );
        Ok((var, moments))
    }

    pub fn batch_norm_eval(&mut self, x: Var, gamma: Var, beta: Var, stats: &RunningStats<T>) -> Result<Var> {
        let [n, c, h, w] = self.check_affine(x, gamma, beta)?;
        if stats.channels() != c {
            return Err(TensorError::ShapeMismatch {
                op: "batch_norm running stats",
                left: self.shape(x).to_vec(),
                right: stats.mean.shape().to_vec(),
            });
        }
        let eps = T::of(BN_EPS);
        let inv_std: Vec<T> = stats
            .var
            .data()
            .iter()
            .map(|&v| T::one() / (v + eps).sqrt())
            .collect();
        let (out, xhat) = self.normalize(x, gamma, beta, stats.mean.data(), &inv_std, [n, c, h * w]);
        let rg = self.rg(&[x, gamma, beta]);
        let value = Tensor::new(&[n, c, h, w], out)?;
        Ok(self.push(
            value,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                train: false,
            },
            rg,
        ))
    }

    /// Batch norm with the running statistics handled according to `mode`.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        stats: &mut RunningStats<T>,
        mode: BnMode,
    ) -> Result<Var> {
        match mode {
            BnMode::Train { track_stats } => {
                let (out, moments) = self.batch_norm_train(x, gamma, beta)?;
                if stats.channels() != moments.mean.len() {
                    return Err(TensorError::ShapeMismatch {
                        op: "batch_norm running stats",
                        left: self.shape(x).to_vec(),
                        right: stats.mean.shape().to_vec(),
                    });
                }
                if track_stats {
                    stats.update(&moments);
                }
                Ok(out)
            }
            BnMode::Eval => self.batch_norm_eval(x, gamma, beta, stats),
        }
    }

    fn normalize(
        &self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: &[T],
        inv_std: &[T],
        [n, c, plane]: [usize; 3],
    ) -> (Vec<T>, Vec<T>) {
        let xv = self.value(x).data();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut out = vec![T::zero(); xv.len()];
        let mut xhat = vec![T::zero(); xv.len()];
        for ni in 0..n {
            for ci in 0..c {
                let range = (ni * c + ci) * plane..(ni * c + ci + 1) * plane;
                for i in range {
                    let xh = (xv[i] - mean[ci]) * inv_std[ci];
                    xhat[i] = xh;
                    out[i] = g[ci] * xh + b[ci];
                }
            }
        }
        (out, xhat)
    }

    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let [n, ca, h, w] = shape4(self.value(a), "concat_channels")?;
        let [nb, cb, hb, wb] = shape4(self.value(b), "concat_channels")?;
        if (n, h, w) != (nb, hb, wb) {
            return Err(TensorError::ShapeMismatch {
                op: "concat_channels",
                left: self.shape(a).to_vec(),
                right: self.shape(b).to_vec(),
            });
        }
        let plane = h * w;
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let mut out = Vec::with_capacity(av.len() + bv.len());
        for ni in 0..n {
            out.extend_from_slice(&av[ni * ca * plane..(ni + 1) * ca * plane]);
            out.extend_from_slice(&bv[ni * cb * plane..(ni + 1) * cb * plane]);
        }
        let value = Tensor::new(&[n, ca + cb, h, w], out)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::Concat(a, b), rg))
    }

    /// Channels `[start, start + len)` of an NCHW tensor.
    pub fn slice_channels(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let [n, c, h, w] = shape4(self.value(x), "slice_channels")?;
        if len == 0 || start + len > c {
            return Err(TensorError::InvalidArgument {
                op: "slice_channels",
                msg: format!("channels {start}..{} out of range for {c}", start + len),
            });
        }
        let plane = h * w;
        let xv = self.value(x).data();
        let mut out = Vec::with_capacity(n * len * plane);
        for ni in 0..n {
            out.extend_from_slice(&xv[(ni * c + start) * plane..(ni * c + start + len) * plane]);
        }
        let value = Tensor::new(&[n, len, h, w], out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::SliceChannels { x, start }, rg))
    }

    /// Splits into the first `k` channels and the remainder; requires `0 < k < C`.
    pub fn split_channels(&mut self, x: Var, k: usize) -> Result<(Var, Var)> {
        let c = shape4(self.value(x), "split_channels")?[1];
        if k == 0 || k >= c {
            return Err(TensorError::InvalidArgument {
                op: "split_channels",
                msg: format!("split point {k} must lie strictly inside 0..{c}"),
            });
        }
        Ok((self.slice_channels(x, 0, k)?, self.slice_channels(x, k, c - k)?))
    }

    /// [N, C, H, W] -> [N, C]
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let [n, c, h, w] = shape4(self.value(x), "global_avg_pool")?;
        let plane = h * w;
        let denom = T::of(plane as f64);
        let out: Vec<T> = self
            .value(x)
            .data()
            .chunks(plane)
            .map(|ch| ch.iter().copied().sum::<T>() / denom)
            .collect();
        let value = Tensor::new(&[n, c], out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::GlobalAvgPool(x), rg))
    }

    /// `x [N, C] @ w[O, C]^T + b`
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (xs, ws) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        let (n, c, o) = match (&xs[..], &ws[..]) {
            ([n, c], [o, wc]) if c == wc => (*n, *c, *o),
            _ => {
                return Err(TensorError::ShapeMismatch {
                    op: "linear",
                    left: xs,
                    right: ws,
                })
            }
        };
        let mut out = vec![T::zero(); n * o];
        gemm(
            Mat::row_major(self.value(x).data(), n, c),
            Mat::row_major(self.value(w).data(), o, c).t(),
            T::zero(),
            &mut out,
        );
        if let Some(b) = b {
            if self.shape(b) != [o] {
                return Err(TensorError::ShapeMismatch {
                    op: "linear bias",
                    left: self.shape(b).to_vec(),
                    right: vec![o],
                });
            }
            let bv = self.value(b).data();
            for row in out.chunks_mut(o) {
                for (r, &bb) in row.iter_mut().zip(bv) {
                    *r += bb;
                }
            }
        }
        let value = Tensor::new(&[n, o], out)?;
        let rg = self.rg(&[x, w]) || b.is_some_and(|b| self.requires_grad(b));
        Ok(self.push(value, Op::Linear { x, w, b }, rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().with_requires_grad(false).reshape(shape)?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::Reshape(x), rg))
    }

    /// Sign pattern of every non-differentiable point argument on the tape
    /// (leaky-ReLU inputs and L1 residuals). Two evaluations with equal
    /// patterns lie on the same smooth piece of the loss.
    pub fn kink_pattern(&self) -> Vec<i8> {
        let mut out = Vec::new();
        for node in &self.nodes {
            match node.op {
                Op::LeakyRelu(x, _) => out.extend(
                    self.value(x)
                        .data()
                        .iter()
                        .map(|&v| i8::from(v > T::zero())),
                ),
                Op::L1(x) => out.extend(self.value(x).data().iter().map(|&v| {
                    if v > T::zero() {
                        1
                    } else if v < T::zero() {
                        -1
                    } else {
                        0
                    }
                })),
                _ => {}
            }
        }
        out
    }

    /// Reverse sweep from a scalar `loss`. A tape supports one backward pass.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients<T>> {
        if self.consumed {
            return Err(TensorError::StaleTape);
        }
        if !self.value(loss).is_scalar() {
            return Err(TensorError::NonScalarLoss(self.shape(loss).to_vec()));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Vec<T>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![T::one()]);
        let mut out = HashMap::new();
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(dy) = grads[i].take() else { continue };
            if let Op::Leaf = node.op {
                let g = Tensor::new(node.value.shape(), dy)?;
                out.insert(Var(i), g);
                continue;
            }
            self.backprop_node(i, &dy, &mut grads);
        }
        Ok(Gradients { grads: out })
    }

    fn backprop_node(&self, i: usize, dy: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[i];
        let wants = |v: Var| self.nodes[v.0].requires_grad;
        let val = |v: Var| self.nodes[v.0].value.data();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                if wants(*a) {
                    accumulate(grads, *a, dy.to_vec());
                }
                if wants(*b) {
                    accumulate(grads, *b, dy.to_vec());
                }
            }
            Op::Sub(a, b) => {
                if wants(*a) {
                    accumulate(grads, *a, dy.to_vec());
                }
                if wants(*b) {
                    accumulate(grads, *b, dy.iter().map(|&g| -g).collect());
                }
            }
            Op::Mul(a, b) => {
                if wants(*a) {
                    let g = dy.iter().zip(val(*b)).map(|(&g, &y)| g * y).collect();
                    accumulate(grads, *a, g);
                }
                if wants(*b) {
                    let g = dy.iter().zip(val(*a)).map(|(&g, &x)| g * x).collect();
                    accumulate(grads, *b, g);
                }
            }
            Op::Scale(a, s) => accumulate(grads, *a, dy.iter().map(|&g| g * *s).collect()),
            Op::Sum(a) => accumulate(grads, *a, vec![dy[0]; val(*a).len()]),
            Op::Mean(a) => {
                let n = val(*a).len();
                accumulate(grads, *a, vec![dy[0] / T::of(n as f64); n]);
            }
            Op::L1(a) => {
                let x = val(*a);
                let scale = dy[0] / T::of(x.len() as f64);
                let g = x
                    .iter()
                    .map(|&v| {
                        if v > T::zero() {
                            scale
                        } else if v < T::zero() {
                            -scale
                        } else {
                            T::zero()
                        }
                    })
                    .collect();
                accumulate(grads, *a, g);
            }
            Op::Sigmoid(a) => {
                let y = node.value.data();
                let g = dy.iter().zip(y).map(|(&g, &s)| g * s * (T::one() - s)).collect();
                accumulate(grads, *a, g);
            }
            Op::Log(a) => {
                let g = dy.iter().zip(val(*a)).map(|(&g, &x)| g / x).collect();
                accumulate(grads, *a, g);
            }
            Op::Softplus(a) => {
                let g = dy.iter().zip(val(*a)).map(|(&g, &x)| g * sigmoid(x)).collect();
                accumulate(grads, *a, g);
            }
            Op::LeakyRelu(a, alpha) => {
                let g = dy
                    .iter()
                    .zip(val(*a))
                    .map(|(&g, &x)| if x > T::zero() { g } else { g * *alpha })
                    .collect();
                accumulate(grads, *a, g);
            }
            Op::Conv2d { x, w, b, geom, cout, cols } => {
                let np = geom.col_cols();
                let plane = geom.oh * geom.ow;
                let dy_cm = batch_to_channel_major(dy, geom.n, *cout, plane);
                if wants(*w) {
                    let mut dw = vec![T::zero(); cout * geom.col_rows()];
                    gemm(
                        Mat::row_major(&dy_cm, *cout, np),
                        Mat::row_major(cols, geom.col_rows(), np).t(),
                        T::zero(),
                        &mut dw,
                    );
                    accumulate(grads, *w, dw);
                }
                if wants(*x) {
                    let mut dcols = vec![T::zero(); geom.col_rows() * np];
                    gemm(
                        Mat::row_major(val(*w), *cout, geom.col_rows()).t(),
                        Mat::row_major(&dy_cm, *cout, np),
                        T::zero(),
                        &mut dcols,
                    );
                    accumulate(grads, *x, col2im(&dcols, geom));
                }
                if let Some(b) = b.filter(|b| wants(*b)) {
                    let db = dy_cm.chunks(np).map(|r| r.iter().copied().sum()).collect();
                    accumulate(grads, b, db);
                }
            }
            Op::ConvTranspose2d { x, w, b, geom, cin, x_cm } => {
                let np = geom.col_cols();
                let dcols = im2col(dy, geom);
                if wants(*w) {
                    let mut dw = vec![T::zero(); cin * geom.col_rows()];
                    gemm(
                        Mat::row_major(x_cm, *cin, np),
                        Mat::row_major(&dcols, geom.col_rows(), np).t(),
                        T::zero(),
                        &mut dw,
                    );
                    accumulate(grads, *w, dw);
                }
                if wants(*x) {
                    let mut dx_cm = vec![T::zero(); cin * np];
                    gemm(
                        Mat::row_major(val(*w), *cin, geom.col_rows()),
                        Mat::row_major(&dcols, geom.col_rows(), np),
                        T::zero(),
                        &mut dx_cm,
                    );
                    accumulate(
                        grads,
                        *x,
                        channel_major_to_batch(&dx_cm, geom.n, *cin, geom.oh * geom.ow),
                    );
                }
                if let Some(b) = b.filter(|b| wants(*b)) {
                    accumulate(grads, b, channel_sums(dy, geom.n, geom.c, geom.h * geom.w));
                }
            }
            Op::BatchNorm { x, gamma, beta, xhat, inv_std, train } => {
                let [n, c, h, w] = shape4(&node.value, "batch_norm").expect("NCHW");
                let plane = h * w;
                let mut sum_dy = vec![T::zero(); c];
                let mut sum_dy_xhat = vec![T::zero(); c];
                for ni in 0..n {
                    for ci in 0..c {
                        for j in (ni * c + ci) * plane..(ni * c + ci + 1) * plane {
                            sum_dy[ci] += dy[j];
                            sum_dy_xhat[ci] += dy[j] * xhat[j];
                        }
                    }
                }
                if wants(*x) {
                    let g = val(*gamma);
                    let count = T::of((n * plane) as f64);
                    let mut dx = vec![T::zero(); dy.len()];
                    for ni in 0..n {
                        for ci in 0..c {
                            let k = g[ci] * inv_std[ci];
                            for j in (ni * c + ci) * plane..(ni * c + ci + 1) * plane {
                                dx[j] = if *train {
                                    k / count * (count * dy[j] - sum_dy[ci] - xhat[j] * sum_dy_xhat[ci])
                                } else {
                                    k * dy[j]
                                };
                            }
                        }
                    }
                    accumulate(grads, *x, dx);
                }
                if wants(*gamma) {
                    accumulate(grads, *gamma, sum_dy_xhat);
                }
                if wants(*beta) {
                    accumulate(grads, *beta, sum_dy);
                }
            }
            Op::Concat(a, b) => {
                let [n, ca, h, w] = shape4(self.value(*a), "concat").expect("NCHW");
                let cb = self.shape(*b)[1];
                let plane = h * w;
                let (mut ga, mut gb) = (Vec::new(), Vec::new());
                for ni in 0..n {
                    let base = ni * (ca + cb) * plane;
                    ga.extend_from_slice(&dy[base..base + ca * plane]);
                    gb.extend_from_slice(&dy[base + ca * plane..base + (ca + cb) * plane]);
                }
                if wants(*a) {
                    accumulate(grads, *a, ga);
                }
                if wants(*b) {
                    accumulate(grads, *b, gb);
                }
            }
            Op::SliceChannels { x, start } => {
                let [n, c, h, w] = shape4(self.value(*x), "slice").expect("NCHW");
                let len = node.value.shape()[1];
                let plane = h * w;
                let mut g = vec![T::zero(); n * c * plane];
                for ni in 0..n {
                    let dst = (ni * c + start) * plane;
                    g[dst..dst + len * plane]
                        .copy_from_slice(&dy[ni * len * plane..(ni + 1) * len * plane]);
                }
                accumulate(grads, *x, g);
            }
            Op::GlobalAvgPool(x) => {
                let [_, _, h, w] = shape4(self.value(*x), "pool").expect("NCHW");
                let plane = h * w;
                let denom = T::of(plane as f64);
                let g = dy
                    .iter()
                    .flat_map(|&g| std::iter::repeat_n(g / denom, plane))
                    .collect();
                accumulate(grads, *x, g);
            }
            Op::Linear { x, w, b } => {
                let (n, c) = (self.shape(*x)[0], self.shape(*x)[1]);
                let o = self.shape(*w)[0];
                if wants(*x) {
                    let mut dx = vec![T::zero(); n * c];
                    gemm(
                        Mat::row_major(dy, n, o),
                        Mat::row_major(val(*w), o, c),
                        T::zero(),
                        &mut dx,
                    );
                    accumulate(grads, *x, dx);
                }
                if wants(*w) {
                    let mut dw = vec![T::zero(); o * c];
                    gemm(
                        Mat::row_major(dy, n, o).t(),
                        Mat::row_major(val(*x), n, c),
                        T::zero(),
                        &mut dw,
                    );
                    accumulate(grads, *w, dw);
                }
                if let Some(b) = b.filter(|b| wants(*b)) {
                    let mut db = vec![T::zero(); o];
                    for row in dy.chunks(o) {
                        for (d, &g) in db.iter_mut().zip(row) {
                            *d += g;
                        }
                    }
                    accumulate(grads, b, db);
                }
            }
            Op::Reshape(x) => accumulate(grads, *x, dy.to_vec()),
        }
    }
}

fn add_channel_bias<T: Float>(out: &mut [T], bias: &[T], plane: usize) {
    let c = bias.len();
    for (i, chunk) in out.chunks_mut(plane).enumerate() {
        let b = bias[i % c];
        for v in chunk {
            *v += b;
        }
    }
}

fn channel_sums<T: Float>(x: &[T], n: usize, c: usize, plane: usize) -> Vec<T> {
    let mut s = vec![T::zero(); c];
    for ni in 0..n {
        for (ci, acc) in s.iter_mut().enumerate() {
            *acc += x[(ni * c + ci) * plane..(ni * c + ci + 1) * plane]
                .iter()
                .copied()
                .sum::<T>();
        }
    }
    s
}
