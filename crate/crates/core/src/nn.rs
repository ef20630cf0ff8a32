//! Differentiable layers built from tape primitives.

use std::sync::Arc;

use rand::Rng;

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{ConvGeom, Real, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerKind {
    Conv2d,
    ConvTranspose2d,
    Conv1d,
    Linear,
}

/// Hyper-parameters of one learned layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerSpec {
    pub kind: LayerKind,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub has_bias: bool,
}

impl LayerSpec {
    pub fn conv2d(in_channels: usize, out_channels: usize, kernel: usize, stride: usize, padding: usize) -> Self {
        LayerSpec { kind: LayerKind::Conv2d, in_channels, out_channels, kernel, stride, padding, has_bias: false }
    }

    pub fn conv_transpose2d(in_channels: usize, out_channels: usize, kernel: usize, stride: usize, padding: usize) -> Self {
        LayerSpec { kind: LayerKind::ConvTranspose2d, ..Self::conv2d(in_channels, out_channels, kernel, stride, padding) }
    }

    pub fn conv1d(in_channels: usize, out_channels: usize) -> Self {
        LayerSpec { kind: LayerKind::Conv1d, has_bias: true, ..Self::conv2d(in_channels, out_channels, 1, 1, 0) }
    }

    pub fn linear(in_features: usize, out_features: usize) -> Self {
        LayerSpec { kind: LayerKind::Linear, has_bias: true, ..Self::conv2d(in_features, out_features, 1, 1, 0) }
    }

    pub fn with_bias(mut self, has_bias: bool) -> Self {
        self.has_bias = has_bias;
        self
    }

    pub fn geom(&self) -> ConvGeom {
        ConvGeom { stride: self.stride, padding: self.padding }
    }

    /// Spatial output extent for an input extent.
    pub fn output_len(&self, input: usize) -> Option<usize> {
        match self.kind {
            LayerKind::Conv2d => self.geom().out_len(input, self.kernel),
            LayerKind::ConvTranspose2d => self.geom().transposed_len(input, self.kernel),
            LayerKind::Conv1d | LayerKind::Linear => Some(input),
        }
    }

    /// Shape of the weight tensor.
    pub fn weight_shape(&self) -> Vec<usize> {
        let k = self.kernel;
        match self.kind {
            LayerKind::Conv2d => vec![self.out_channels, self.in_channels, k, k],
            LayerKind::ConvTranspose2d => vec![self.in_channels, self.out_channels, k, k],
            LayerKind::Conv1d => vec![self.out_channels, self.in_channels, 1],
            LayerKind::Linear => vec![self.out_channels, self.in_channels],
        }
    }

    pub fn fan_in(&self) -> usize {
        match self.kind {
            LayerKind::ConvTranspose2d => self.out_channels * self.kernel * self.kernel,
            _ => self.in_channels * self.kernel * self.kernel,
        }
    }

    /// Weight drawn from `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
    pub fn init_weight<T: Real>(&self, rng: &mut impl Rng) -> Tensor<T> {
        let bound = 1.0 / (self.fan_in().max(1) as f64).sqrt();
        Tensor::from_fn(&self.weight_shape(), |_| T::from_f64_lossy(rng.gen_range(-bound..bound)))
    }

    fn check_kind(&self, kind: LayerKind) -> Result<()> {
        if self.kind != kind {
            return Err(Error::Config(format!("layer spec {:?} used as {:?}", self.kind, kind)));
        }
        Ok(())
    }
}

fn add_channel_bias<T: Real>(tape: &mut Tape<T>, y: Var, bias: Option<Var>, axis: usize) -> Result<Var> {
    let Some(b) = bias else { return Ok(y) };
    let rank = tape.shape(y).len();
    let c = tape.shape(y)[axis];
    let mut shape = vec![1; rank];
    shape[axis] = c;
    let b = tape.reshape(b, &shape)?;
    tape.add(y, b)
}

pub fn conv2d<T: Real>(tape: &mut Tape<T>, x: Var, w: Var, bias: Option<Var>, spec: &LayerSpec) -> Result<Var> {
    spec.check_kind(LayerKind::Conv2d)?;
    let y = tape.conv2d(x, w, spec.geom())?;
    add_channel_bias(tape, y, bias, 1)
}

pub fn conv_transpose2d<T: Real>(tape: &mut Tape<T>, x: Var, w: Var, bias: Option<Var>, spec: &LayerSpec) -> Result<Var> {
    spec.check_kind(LayerKind::ConvTranspose2d)?;
    let y = tape.conv_transpose2d(x, w, spec.geom())?;
    add_channel_bias(tape, y, bias, 1)
}

/// `x: N x in`, `w: out x in` gives `N x out`.
pub fn linear<T: Real>(tape: &mut Tape<T>, x: Var, w: Var, bias: Option<Var>) -> Result<Var> {
    let wt = tape.transpose(w)?;
    let y = tape.matmul(x, wt)?;
    add_channel_bias(tape, y, bias, 1)
}

/// Kernel-1 convolution over `B x C x n`: the same linear map is applied to
/// each of the `n` columns.
pub fn conv1d_group_project<T: Real>(tape: &mut Tape<T>, x: Var, w: Var, bias: Option<Var>, spec: &LayerSpec) -> Result<Var> {
    spec.check_kind(LayerKind::Conv1d)?;
    if spec.kernel != 1 || tape.shape(w).len() != 3 || tape.shape(w)[2] != 1 {
        return Err(Error::Config(format!(
            "group projection needs kernel size 1, got {} (weight {:?})",
            spec.kernel,
            tape.shape(w)
        )));
    }
    let xs = tape.shape(x).to_vec();
    if xs.len() != 3 {
        return Err(Error::Shape(format!("conv1d_group_project: expected B x C x n input, got {:?}", xs)));
    }
    let (b, c, n) = (xs[0], xs[1], xs[2]);
    let ws = tape.shape(w).to_vec();
    let w2 = tape.reshape(w, &[ws[0], ws[1]])?;
    let cols = tape.permute(x, &[0, 2, 1])?;
    let cols = tape.reshape(cols, &[b * n, c])?;
    let y = linear(tape, cols, w2, bias)?;
    let y = tape.reshape(y, &[b, n, ws[0]])?;
    tape.permute(y, &[0, 2, 1])
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BatchNormMode {
    /// Normalize with batch statistics.
    Train,
    /// Normalize with running statistics.
    Eval,
}

pub const BN_MOMENTUM: f64 = 0.1;
pub const BN_EPS: f64 = 1e-5;

/// Batch statistics produced by a training-mode batch norm.
#[derive(Debug, Clone)]
pub struct BatchStats<T> {
    pub mean: Tensor<T>,
    /// Unbiased variance, as stored in running statistics.
    pub var: Tensor<T>,
}

/// Exponential moving update `running = (1 - m) * running + m * batch`.
pub fn update_running<T: Real>(running: &mut Tensor<T>, batch: &Tensor<T>, momentum: f64) {
    let m = T::from_f64_lossy(momentum);
    for (r, &b) in running.data_mut().iter_mut().zip(batch.data()) {
        *r = (T::one() - m) * *r + m * b;
    }
}

/// Batch normalization over `N x F` or `B x C x H x W` inputs (per feature /
/// channel). The batch reduction is order-independent, so permuting the
/// rows of the batch permutes the output rows bit-exactly.
pub fn batch_norm<T: Real>(
    tape: &mut Tape<T>,
    x: Var,
    gamma: Var,
    beta: Var,
    running_mean: &Tensor<T>,
    running_var: &Tensor<T>,
    mode: BatchNormMode,
) -> Result<(Var, Option<BatchStats<T>>)> {
    let xs = tape.shape(x).to_vec();
    let (n, c, spatial) = match xs.len() {
        2 => (xs[0], xs[1], 1),
        4 => (xs[0], xs[1], xs[2] * xs[3]),
        _ => return Err(Error::Shape(format!("batch_norm: expected 2-d or 4-d input, got {:?}", xs))),
    };
    let mut param_shape = vec![1; xs.len()];
    param_shape[1] = c;
    let g = tape.reshape(gamma, &param_shape)?;
    let b = tape.reshape(beta, &param_shape)?;
    match mode {
        BatchNormMode::Train => {
            if n < 2 {
                return Err(Error::Config(format!(
                    "batch_norm in training mode needs a batch of at least 2, got {}",
                    n
                )));
            }
            let count = (n * spatial) as f64;
            let per_channel = |tape: &mut Tape<T>, v: Var| -> Result<Var> {
                let r = tape.reshape(v, &[n, c, spatial])?;
                let r = tape.sum_axis(r, 2, false)?;
                let r = tape.sum_axis(r, 0, true)?;
                let r = tape.scale(r, 1.0 / count)?;
                tape.reshape(r, &param_shape)
            };
            let mean = per_channel(tape, x)?;
            let xc = tape.sub(x, mean)?;
            let sq = tape.square(xc)?;
            let var = per_channel(tape, sq)?;
            let ve = tape.add_scalar(var, BN_EPS)?;
            let inv = tape.pow(ve, -0.5)?;
            let y = tape.mul(xc, inv)?;
            let y = tape.mul(y, g)?;
            let y = tape.add(y, b)?;
            let unbias = T::from_f64_lossy(count / (count - 1.0));
            let stats = BatchStats {
                mean: tape.value(mean).reshape(&[c])?,
                var: tape.value(var).reshape(&[c])?.map(|v| v * unbias),
            };
            Ok((y, Some(stats)))
        }
        BatchNormMode::Eval => {
            let eps = T::from_f64_lossy(BN_EPS);
            let m = tape.constant(running_mean.reshape(&param_shape)?);
            let inv = running_var.map(|v| T::one() / (v + eps).sqrt()).reshape(&param_shape)?;
            let inv = tape.constant(inv);
            let xc = tape.sub(x, m)?;
            let y = tape.mul(xc, inv)?;
            let y = tape.mul(y, g)?;
            Ok((tape.add(y, b)?, None))
        }
    }
}

/// Featurewise sort pooling configuration.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FSPoolSpec {
    pub feature_dim: usize,
    /// Number of linear segments; the weight table has `pieces + 1` columns.
    pub pieces: usize,
}

impl FSPoolSpec {
    pub fn weight_shape(&self) -> [usize; 2] {
        [self.feature_dim, self.pieces + 1]
    }

    /// Sum-pool equivalent table (all ones) plus `U(-0.01, 0.01)` noise.
    pub fn init_weights<T: Real>(&self, rng: &mut impl Rng) -> Tensor<T> {
        Tensor::from_fn(&self.weight_shape(), |_| T::from_f64_lossy(1.0 + rng.gen_range(-0.01..0.01)))
    }

    /// `n x (pieces + 1)` interpolation matrix: row `i` evaluates the
    /// piecewise-linear weight function at rank `i / (n - 1)`.
    pub fn rank_interpolation<T: Real>(&self, n: usize) -> Tensor<T> {
        let k = self.pieces;
        let mut m = Tensor::zeros(&[n, k + 1]);
        for i in 0..n {
            let r = if n > 1 { i as f64 / (n - 1) as f64 } else { 0.0 };
            let pos = r.clamp(0.0, 1.0) * k as f64;
            if k == 0 {
                m.data_mut()[i] = T::one();
                continue;
            }
            let lo = (pos.floor() as usize).min(k - 1);
            let frac = pos - lo as f64;
            m.data_mut()[i * (k + 1) + lo] = T::from_f64_lossy(1.0 - frac);
            m.data_mut()[i * (k + 1) + lo + 1] = T::from_f64_lossy(frac);
        }
        m
    }
}

/// Per batch item and feature: ranks of the `n` values in descending order,
/// ties broken by original index.
pub fn descending_ranks<T: Real>(s: &Tensor<T>) -> Vec<usize> {
    let (b, n, d) = (s.shape()[0], s.shape()[1], s.shape()[2]);
    let data = s.data();
    let mut index = vec![0usize; b * n * d];
    let mut order: Vec<usize> = Vec::with_capacity(n);
    for bi in 0..b {
        for j in 0..d {
            order.clear();
            order.extend(0..n);
            let at = |i: usize| data[(bi * n + i) * d + j];
            order.sort_by(|&p, &q| {
                at(q).partial_cmp(&at(p)).unwrap_or(std::cmp::Ordering::Equal).then(p.cmp(&q))
            });
            for (rank, &src) in order.iter().enumerate() {
                index[(bi * n + rank) * d + j] = src;
            }
        }
    }
    index
}

/// FSPool over `s: B x n x d` with weight table `d x (pieces + 1)`, giving
/// `B x d`. Gradients flow through the sort permutation and into the table.
pub fn fspool<T: Real>(tape: &mut Tape<T>, s: Var, weights: Var, spec: &FSPoolSpec) -> Result<Var> {
    let ss = tape.shape(s).to_vec();
    if ss.len() != 3 || ss[2] != spec.feature_dim || ss[1] == 0 {
        return Err(Error::Shape(format!(
            "fspool: expected B x n x {} input with n >= 1, got {:?}",
            spec.feature_dim, ss
        )));
    }
    if tape.shape(weights) != spec.weight_shape() {
        return Err(Error::Shape(format!(
            "fspool: weight table {:?}, expected {:?}",
            tape.shape(weights),
            spec.weight_shape()
        )));
    }
    let (b, n, d) = (ss[0], ss[1], ss[2]);
    let index = Arc::new(descending_ranks(tape.value(s)));
    let sorted = tape.gather(s, 1, index, &ss)?;
    let interp = tape.constant(spec.rank_interpolation(n));
    let wt = tape.transpose(weights)?;
    let w = tape.matmul(interp, wt)?;
    let w = tape.reshape(w, &[1, n, d])?;
    let weighted = tape.mul(sorted, w)?;
    let pooled = tape.sum_axis(weighted, 1, false)?;
    tape.reshape(pooled, &[b, d])
}

/// Softmax along `axis`; the normalizer is summed in an order-independent way.
pub fn softmax<T: Real>(tape: &mut Tape<T>, x: Var, axis: usize) -> Result<Var> {
    let xs = tape.shape(x);
    if axis >= xs.len() || xs[axis] == 0 {
        return Err(Error::Shape(format!("softmax over empty or missing axis {} of {:?}", axis, xs)));
    }
    let max = tape.value(x).max_axis(axis)?;
    let max = tape.constant(max);
    let shifted = tape.sub(x, max)?;
    let e = tape.exp(shifted)?;
    let z = tape.sum_axis(e, axis, true)?;
    tape.div(e, z)
}

pub fn relu<T: Real>(tape: &mut Tape<T>, x: Var) -> Result<Var> {
    tape.relu(x)
}

pub fn sigmoid<T: Real>(tape: &mut Tape<T>, x: Var) -> Result<Var> {
    tape.sigmoid(x)
}

/// Mean of squared differences.
pub fn mse<T: Real>(tape: &mut Tape<T>, pred: Var, target: Var) -> Result<Var> {
    if tape.shape(pred) != tape.shape(target) {
        return Err(Error::Shape(format!(
            "mse: prediction {:?} and target {:?} differ",
            tape.shape(pred),
            tape.shape(target)
        )));
    }
    let d = tape.sub(pred, target)?;
    let sq = tape.square(d)?;
    tape.mean(sq)
}
