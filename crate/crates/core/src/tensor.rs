//! Dense row-major tensors and the raw numeric kernels the tape is built on.
//!
//! Everything here is plain value math: no graph, no gradients. The autodiff
//! layer in [`crate::autograd`] records calls into these kernels and composes
//! their adjoints out of the same kernels.

use std::fmt;

use num_traits::{Float, FromPrimitive, ToPrimitive};

use crate::error::{Error, Result};

/// Element type of a tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DType {
    Real32,
    Real64,
}

/// Scalar types the engine computes in.
pub trait Real:
    Float
    + FromPrimitive
    + ToPrimitive
    + Default
    + fmt::Debug
    + fmt::Display
    + Send
    + Sync
    + std::iter::Sum
    + 'static
{
    const DTYPE: DType;

    /// `c = alpha * a * b + beta * c` with arbitrary row/column strides.
    ///
    /// # Safety
    /// Pointers and strides must describe valid, non-aliasing (for `c`)
    /// matrices of the stated extents.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );

    fn from_f64_lossy(x: f64) -> Self {
        <Self as FromPrimitive>::from_f64(x).unwrap_or_else(Self::nan)
    }

    fn as_f64(self) -> f64 {
        ToPrimitive::to_f64(&self).unwrap_or(f64::NAN)
    }
}

impl Real for f32 {
    const DTYPE: DType = DType::Real32;

    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: f32,
        a: *const f32,
        rsa: isize,
        csa: isize,
        b: *const f32,
        rsb: isize,
        csb: isize,
        beta: f32,
        c: *mut f32,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }
}

impl Real for f64 {
    const DTYPE: DType = DType::Real64;

    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: f64,
        a: *const f64,
        rsa: isize,
        csa: isize,
        b: *const f64,
        rsb: isize,
        csb: isize,
        beta: f64,
        c: *mut f64,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }
}

/// Safe matrix product `c (+)= op(a) * op(b)` on row-major buffers.
///
/// `a` is `m x k` (or `k x m` stored when `trans_a`), `b` is `k x n` (or
/// `n x k` when `trans_b`), `c` is `m x n`.
#[allow(clippy::too_many_arguments)]
pub fn gemm<T: Real>(
    trans_a: bool,
    trans_b: bool,
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    b: &[T],
    c: &mut [T],
    accumulate: bool,
) {
    assert_eq!(a.len(), m * k, "gemm: lhs length");
    assert_eq!(b.len(), k * n, "gemm: rhs length");
    assert_eq!(c.len(), m * n, "gemm: output length");
    if m == 0 || n == 0 {
        return;
    }
    let beta = if accumulate { T::one() } else { T::zero() };
    if k == 0 {
        if !accumulate {
            c.iter_mut().for_each(|v| *v = T::zero());
        }
        return;
    }
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: lengths asserted above; c is a distinct &mut borrow.
    unsafe {
        T::gemm_raw(
            m,
            k,
            n,
            T::one(),
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Dense n-dimensional array in row-major order.
#[derive(Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: fmt::Debug> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.data.len() <= 16 {
            write!(f, "Tensor{:?}{:?}", self.shape, self.data)
        } else {
            write!(f, "Tensor{:?}[{} values]", self.shape, self.data.len())
        }
    }
}

pub fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

pub fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![0; shape.len()];
    let mut acc = 1;
    for i in (0..shape.len()).rev() {
        s[i] = acc;
        acc *= shape[i];
    }
    s
}

/// Numpy-style broadcast of two shapes.
pub fn broadcast_shapes(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = if da == db {
            da
        } else if da == 1 {
            db
        } else if db == 1 {
            da
        } else {
            return None;
        };
    }
    Some(out)
}

/// Strides of `shape` viewed inside the broadcast `out` shape; broadcast dims get 0.
fn broadcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let own = strides(shape);
    let off = out.len() - shape.len();
    (0..out.len())
        .map(|i| {
            if i < off || shape[i - off] == 1 {
                0
            } else {
                own[i - off]
            }
        })
        .collect()
}

/// Calls `f(out_index, src_index)` for every element of `out`, walking the
/// source with the given (possibly zero) strides.
fn for_each_strided(out: &[usize], src_strides: &[usize], mut f: impl FnMut(usize, usize)) {
    let total = numel(out);
    if total == 0 {
        return;
    }
    let rank = out.len();
    if rank == 0 {
        f(0, 0);
        return;
    }
    let mut idx = vec![0usize; rank];
    let mut src = 0usize;
    let inner = out[rank - 1];
    let inner_stride = src_strides[rank - 1];
    let mut o = 0;
    while o < total {
        for j in 0..inner {
            f(o + j, src + j * inner_stride);
        }
        o += inner;
        // carry into outer dims
        let mut d = rank - 1;
        loop {
            if d == 0 {
                break;
            }
            d -= 1;
            idx[d] += 1;
            src += src_strides[d];
            if idx[d] < out[d] {
                break;
            }
            src -= src_strides[d] * out[d];
            idx[d] = 0;
        }
    }
}

impl<T: Real> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        if numel(&shape) != data.len() {
            return Err(Error::Shape(format!(
                "tensor of shape {:?} needs {} values, got {}",
                shape,
                numel(&shape),
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn from_vec(data: Vec<T>) -> Self {
        Tensor { shape: vec![data.len()], data }
    }

    pub fn scalar(v: T) -> Self {
        Tensor { shape: vec![], data: vec![v] }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, T::one())
    }

    pub fn full(shape: &[usize], v: T) -> Self {
        Tensor { shape: shape.to_vec(), data: vec![v; numel(shape)] }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> T) -> Self {
        Tensor { shape: shape.to_vec(), data: (0..numel(shape)).map(&mut f).collect() }
    }

    /// Square identity matrix.
    pub fn eye(n: usize) -> Self {
        Self::from_fn(&[n, n], |i| if i / n == i % n { T::one() } else { T::zero() })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn dtype(&self) -> DType {
        T::DTYPE
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> T {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        if numel(shape) != self.numel() {
            return Err(Error::Shape(format!(
                "reshape: cannot view {:?} as {:?}",
                self.shape, shape
            )));
        }
        Ok(Tensor { shape: shape.to_vec(), data: self.data.clone() })
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::from_f64_lossy(v.as_f64())).collect(),
        }
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|&v| f(v)).collect() }
    }

    /// Elementwise binary op with numpy broadcasting.
    pub fn zip_broadcast(&self, other: &Self, f: impl Fn(T, T) -> T) -> Result<Self> {
        if self.shape == other.shape {
            let data = self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect();
            return Ok(Tensor { shape: self.shape.clone(), data });
        }
        let out = broadcast_shapes(&self.shape, &other.shape).ok_or_else(|| {
            Error::Shape(format!(
                "cannot broadcast {:?} with {:?}",
                self.shape, other.shape
            ))
        })?;
        let sa = broadcast_strides(&self.shape, &out);
        let sb = broadcast_strides(&other.shape, &out);
        let n = numel(&out);
        let mut ai = vec![0usize; n];
        for_each_strided(&out, &sa, |o, s| ai[o] = s);
        let mut data = vec![T::zero(); n];
        for_each_strided(&out, &sb, |o, s| data[o] = f(self.data[ai[o]], other.data[s]));
        Ok(Tensor { shape: out, data })
    }

    pub fn broadcast_to(&self, shape: &[usize]) -> Result<Self> {
        match broadcast_shapes(&self.shape, shape) {
            Some(ref s) if s.as_slice() == shape => {}
            _ => {
                return Err(Error::Shape(format!(
                    "broadcast_to: {:?} does not broadcast to {:?}",
                    self.shape, shape
                )))
            }
        }
        let st = broadcast_strides(&self.shape, shape);
        let mut data = vec![T::zero(); numel(shape)];
        for_each_strided(shape, &st, |o, s| data[o] = self.data[s]);
        Ok(Tensor { shape: shape.to_vec(), data })
    }

    /// Sums broadcast dimensions away so the result has `shape`.
    /// Inverse of [`Tensor::broadcast_to`]; accumulation runs in index order.
    pub fn sum_to(&self, shape: &[usize]) -> Result<Self> {
        if self.shape == shape {
            return Ok(self.clone());
        }
        match broadcast_shapes(shape, &self.shape) {
            Some(ref s) if *s == self.shape => {}
            _ => {
                return Err(Error::Shape(format!(
                    "sum_to: {:?} cannot be reduced to {:?}",
                    self.shape, shape
                )))
            }
        }
        let st = broadcast_strides(shape, &self.shape);
        let mut data = vec![T::zero(); numel(shape)];
        for_each_strided(&self.shape, &st, |o, s| data[s] = data[s] + self.data[o]);
        Ok(Tensor { shape: shape.to_vec(), data })
    }

    /// Sum over one axis, keeping it with extent 1. When `canonical` is set
    /// the terms of every reduction are added in ascending value order, so
    /// the result does not depend on the order of entries along the axis.
    pub fn sum_axis(&self, axis: usize, canonical: bool) -> Result<Self> {
        if axis >= self.rank() {
            return Err(Error::Shape(format!(
                "sum_axis: axis {} out of range for {:?}",
                axis, self.shape
            )));
        }
        let outer: usize = self.shape[..axis].iter().product();
        let len = self.shape[axis];
        let inner: usize = self.shape[axis + 1..].iter().product();
        let mut out_shape = self.shape.clone();
        out_shape[axis] = 1;
        let mut data = vec![T::zero(); outer * inner];
        if canonical {
            let mut buf = Vec::with_capacity(len);
            for o in 0..outer {
                for i in 0..inner {
                    buf.clear();
                    buf.extend((0..len).map(|a| self.data[(o * len + a) * inner + i]));
                    buf.sort_by(|x, y| x.partial_cmp(y).unwrap_or(std::cmp::Ordering::Equal));
                    data[o * inner + i] = buf.iter().fold(T::zero(), |acc, &v| acc + v);
                }
            }
        } else {
            for o in 0..outer {
                for a in 0..len {
                    let src = &self.data[(o * len + a) * inner..(o * len + a + 1) * inner];
                    let dst = &mut data[o * inner..(o + 1) * inner];
                    for (d, &s) in dst.iter_mut().zip(src) {
                        *d = *d + s;
                    }
                }
            }
        }
        Ok(Tensor { shape: out_shape, data })
    }

    /// Maximum over one axis, keeping it with extent 1.
    pub fn max_axis(&self, axis: usize) -> Result<Self> {
        if axis >= self.rank() || self.shape[axis] == 0 {
            return Err(Error::Shape(format!(
                "max_axis: axis {} invalid or empty for {:?}",
                axis, self.shape
            )));
        }
        let outer: usize = self.shape[..axis].iter().product();
        let len = self.shape[axis];
        let inner: usize = self.shape[axis + 1..].iter().product();
        let mut out_shape = self.shape.clone();
        out_shape[axis] = 1;
        let mut data = vec![T::neg_infinity(); outer * inner];
        for o in 0..outer {
            for a in 0..len {
                for i in 0..inner {
                    let v = self.data[(o * len + a) * inner + i];
                    let d = &mut data[o * inner + i];
                    if v > *d {
                        *d = v;
                    }
                }
            }
        }
        Ok(Tensor { shape: out_shape, data })
    }

    pub fn sum_all(&self) -> T {
        self.data.iter().fold(T::zero(), |acc, &v| acc + v)
    }

    pub fn permute(&self, perm: &[usize]) -> Result<Self> {
        let rank = self.rank();
        let mut seen = vec![false; rank];
        if perm.len() != rank || perm.iter().any(|&p| p >= rank || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::Shape(format!(
                "permute: {:?} is not a permutation of rank {}",
                perm, rank
            )));
        }
        let own = strides(&self.shape);
        let out_shape: Vec<usize> = perm.iter().map(|&p| self.shape[p]).collect();
        let src_strides: Vec<usize> = perm.iter().map(|&p| own[p]).collect();
        let mut data = vec![T::zero(); self.numel()];
        for_each_strided(&out_shape, &src_strides, |o, s| data[o] = self.data[s]);
        Ok(Tensor { shape: out_shape, data })
    }

    pub fn matmul(&self, other: &Self) -> Result<Self> {
        if self.rank() != 2 || other.rank() != 2 || self.shape[1] != other.shape[0] {
            return Err(Error::Shape(format!(
                "matmul: incompatible shapes {:?} and {:?}",
                self.shape, other.shape
            )));
        }
        let (m, k, n) = (self.shape[0], self.shape[1], other.shape[1]);
        let mut data = vec![T::zero(); m * n];
        gemm(false, false, m, k, n, &self.data, &other.data, &mut data, false);
        Ok(Tensor { shape: vec![m, n], data })
    }

    /// `out[.., i, ..] = self[.., index[.., i, ..], ..]` along `axis`;
    /// `index` has the output shape.
    pub fn gather(&self, axis: usize, index: &[usize], index_shape: &[usize]) -> Result<Self> {
        check_gather(&self.shape, axis, index, index_shape)?;
        let outer: usize = index_shape[..axis].iter().product();
        let len_out = index_shape[axis];
        let len_in = self.shape[axis];
        let inner: usize = index_shape[axis + 1..].iter().product();
        let mut data = vec![T::zero(); index.len()];
        for o in 0..outer {
            for a in 0..len_out {
                for i in 0..inner {
                    let pos = (o * len_out + a) * inner + i;
                    data[pos] = self.data[(o * len_in + index[pos]) * inner + i];
                }
            }
        }
        Ok(Tensor { shape: index_shape.to_vec(), data })
    }

    /// Adjoint of [`Tensor::gather`]: accumulates `self` (shaped like the
    /// index) into a zero tensor of `out_shape`.
    pub fn scatter_add(&self, axis: usize, index: &[usize], out_shape: &[usize]) -> Result<Self> {
        check_gather(out_shape, axis, index, &self.shape)?;
        let outer: usize = self.shape[..axis].iter().product();
        let len_in = self.shape[axis];
        let len_out = out_shape[axis];
        let inner: usize = self.shape[axis + 1..].iter().product();
        let mut data = vec![T::zero(); numel(out_shape)];
        for o in 0..outer {
            for a in 0..len_in {
                for i in 0..inner {
                    let pos = (o * len_in + a) * inner + i;
                    let dst = (o * len_out + index[pos]) * inner + i;
                    data[dst] = data[dst] + self.data[pos];
                }
            }
        }
        Ok(Tensor { shape: out_shape.to_vec(), data })
    }
}

fn check_gather(src: &[usize], axis: usize, index: &[usize], index_shape: &[usize]) -> Result<()> {
    let ok = axis < src.len()
        && src.len() == index_shape.len()
        && numel(index_shape) == index.len()
        && (0..src.len()).all(|d| d == axis || src[d] == index_shape[d])
        && index.iter().all(|&i| i < src[axis]);
    if ok {
        Ok(())
    } else {
        Err(Error::Shape(format!(
            "gather/scatter: index of shape {:?} invalid for {:?} along axis {}",
            index_shape, src, axis
        )))
    }
}

/// Geometry of a square-kernel 2-D convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeom {
    /// Output extent of a convolution over `input` with kernel `k`.
    pub fn out_len(&self, input: usize, k: usize) -> Option<usize> {
        let padded = input + 2 * self.padding;
        if k > padded || self.stride == 0 {
            None
        } else {
            Some((padded - k) / self.stride + 1)
        }
    }

    /// Natural output extent of the transposed convolution.
    pub fn transposed_len(&self, input: usize, k: usize) -> Option<usize> {
        ((input.max(1) - 1) * self.stride + k).checked_sub(2 * self.padding)
    }
}

/// Unfolds one image `c x h x w` into `(c*k*k) x (ho*wo)` columns.
#[allow(clippy::too_many_arguments)]
fn im2col<T: Real>(
    x: &[T],
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    g: ConvGeom,
    ho: usize,
    wo: usize,
    cols: &mut [T],
) {
    let p = g.padding as isize;
    let s = g.stride as isize;
    for ci in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let dst = &mut cols[row * ho * wo..(row + 1) * ho * wo];
                for oy in 0..ho {
                    let iy = oy as isize * s - p + ky as isize;
                    let line = &mut dst[oy * wo..(oy + 1) * wo];
                    if iy < 0 || iy >= h as isize {
                        line.iter_mut().for_each(|v| *v = T::zero());
                        continue;
                    }
                    let src = &x[(ci * h + iy as usize) * w..(ci * h + iy as usize + 1) * w];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = ox as isize * s - p + kx as isize;
                        *v = if ix < 0 || ix >= w as isize { T::zero() } else { src[ix as usize] };
                    }
                }
            }
        }
    }
}

/// Folds columns back into an image, accumulating overlaps (adjoint of im2col).
#[allow(clippy::too_many_arguments)]
fn col2im<T: Real>(
    cols: &[T],
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    g: ConvGeom,
    ho: usize,
    wo: usize,
    x: &mut [T],
) {
    let p = g.padding as isize;
    let s = g.stride as isize;
    for ci in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let src = &cols[row * ho * wo..(row + 1) * ho * wo];
                for oy in 0..ho {
                    let iy = oy as isize * s - p + ky as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst = &mut x[(ci * h + iy as usize) * w..(ci * h + iy as usize + 1) * w];
                    for ox in 0..wo {
                        let ix = ox as isize * s - p + kx as isize;
                        if ix >= 0 && ix < w as isize {
                            dst[ix as usize] = dst[ix as usize] + src[oy * wo + ox];
                        }
                    }
                }
            }
        }
    }
}

fn conv_dims(x: &[usize], w: &[usize]) -> Result<(usize, usize, usize, usize, usize, usize)> {
    if x.len() != 4 || w.len() != 4 || w[2] != w[3] {
        return Err(Error::Shape(format!(
            "conv: expected 4-d input and square 4-d kernel, got {:?} and {:?}",
            x, w
        )));
    }
    Ok((x[0], x[1], x[2], x[3], w[0], w[2]))
}

/// Cross-correlation `x: B x C x H x W` with `w: O x C x k x k`.
pub fn conv2d<T: Real>(x: &Tensor<T>, w: &Tensor<T>, g: ConvGeom) -> Result<Tensor<T>> {
    let (b, c, h, wd, o, k) = conv_dims(x.shape(), w.shape())?;
    if w.shape()[1] != c {
        return Err(Error::Shape(format!(
            "conv2d: input has {} channels, kernel {:?} expects {}",
            c,
            w.shape(),
            w.shape()[1]
        )));
    }
    let (ho, wo) = match (g.out_len(h, k), g.out_len(wd, k)) {
        (Some(a), Some(bb)) => (a, bb),
        _ => {
            return Err(Error::Shape(format!(
                "conv2d: kernel {} larger than padded input {}x{} (padding {})",
                k, h, wd, g.padding
            )))
        }
    };
    let ckk = c * k * k;
    let mut cols = vec![T::zero(); ckk * ho * wo];
    let mut out = vec![T::zero(); b * o * ho * wo];
    for bi in 0..b {
        im2col(&x.data[bi * c * h * wd..(bi + 1) * c * h * wd], c, h, wd, k, g, ho, wo, &mut cols);
        gemm(
            false,
            false,
            o,
            ckk,
            ho * wo,
            &w.data,
            &cols,
            &mut out[bi * o * ho * wo..(bi + 1) * o * ho * wo],
            false,
        );
    }
    Tensor::new(vec![b, o, ho, wo], out)
}

/// Adjoint of [`conv2d`] in its input: `y: B x O x Ho x Wo`, `w: O x C x k x k`,
/// producing `B x C x out_h x out_w`.
pub fn conv_transpose2d<T: Real>(
    y: &Tensor<T>,
    w: &Tensor<T>,
    g: ConvGeom,
    out_hw: (usize, usize),
) -> Result<Tensor<T>> {
    let (b, o, ho, wo, o2, k) = conv_dims(y.shape(), w.shape())?;
    if o != o2 {
        return Err(Error::Shape(format!(
            "conv_transpose2d: input has {} channels, kernel {:?} expects {}",
            o,
            w.shape(),
            o2
        )));
    }
    let c = w.shape()[1];
    let (h, wd) = out_hw;
    if g.out_len(h, k) != Some(ho) || g.out_len(wd, k) != Some(wo) {
        return Err(Error::Shape(format!(
            "conv_transpose2d: output {}x{} is not consistent with input {}x{} (kernel {}, stride {}, padding {})",
            h, wd, ho, wo, k, g.stride, g.padding
        )));
    }
    let ckk = c * k * k;
    let mut cols = vec![T::zero(); ckk * ho * wo];
    let mut out = vec![T::zero(); b * c * h * wd];
    for bi in 0..b {
        gemm(
            true,
            false,
            ckk,
            o,
            ho * wo,
            &w.data,
            &y.data[bi * o * ho * wo..(bi + 1) * o * ho * wo],
            &mut cols,
            false,
        );
        col2im(&cols, c, h, wd, k, g, ho, wo, &mut out[bi * c * h * wd..(bi + 1) * c * h * wd]);
    }
    Tensor::new(vec![b, c, h, wd], out)
}

/// Gradient of `<conv2d(x, w), gy>` with respect to `w`, summed over the batch.
pub fn conv2d_weight_grad<T: Real>(
    x: &Tensor<T>,
    gy: &Tensor<T>,
    k: usize,
    g: ConvGeom,
) -> Result<Tensor<T>> {
    if x.rank() != 4 || gy.rank() != 4 || x.shape()[0] != gy.shape()[0] {
        return Err(Error::Shape(format!(
            "conv2d_weight_grad: incompatible {:?} and {:?}",
            x.shape(),
            gy.shape()
        )));
    }
    let (b, c, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (o, ho, wo) = (gy.shape()[1], gy.shape()[2], gy.shape()[3]);
    if g.out_len(h, k) != Some(ho) || g.out_len(wd, k) != Some(wo) {
        return Err(Error::Shape(format!(
            "conv2d_weight_grad: output grad {:?} inconsistent with input {:?} for kernel {}",
            gy.shape(),
            x.shape(),
            k
        )));
    }
    let ckk = c * k * k;
    let mut cols = vec![T::zero(); ckk * ho * wo];
    let mut out = vec![T::zero(); o * ckk];
    for bi in 0..b {
        im2col(&x.data[bi * c * h * wd..(bi + 1) * c * h * wd], c, h, wd, k, g, ho, wo, &mut cols);
        gemm(
            false,
            true,
            o,
            ho * wo,
            ckk,
            &gy.data[bi * o * ho * wo..(bi + 1) * o * ho * wo],
            &cols,
            &mut out,
            bi > 0,
        );
    }
    Tensor::new(vec![o, c, k, k], out)
}
