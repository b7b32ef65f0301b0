//! Dense f32 tensors plus the reverse-mode autodiff engine built on them.
//!
//! `Tensor` is a plain value type (row-major `Vec<f32>` + shape) used for
//! checkpoints, graph initializers and intermediate buffers. `Var`/`Tape` in
//! [`autodiff`] wrap tensors for gradient tracking during training.

mod autodiff;
mod losses;
mod optim;

pub use autodiff::{Tape, Var};
pub(crate) use autodiff::matmul_dims;
pub use optim::{zero_grads, AdamW};

use crate::error::{GcError, Result};

/// Dense row-major f32 tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(GcError::ShapeMismatch {
                op: "tensor",
                detail: format!("shape {:?} implies {} elements, got {}", shape, n, data.len()),
            });
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        let n: usize = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![0.0; n] }
    }

    pub fn full(shape: &[usize], v: f32) -> Tensor {
        let n: usize = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![v; n] }
    }

    /// Rank-1 single-element tensor, the representation used for loss scalars.
    pub fn scalar(v: f32) -> Tensor {
        Tensor { shape: vec![1], data: vec![v] }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn item(&self) -> f32 {
        debug_assert_eq!(self.numel(), 1);
        self.data[0]
    }

    /// Reinterpret with a new shape of equal element count.
    pub fn reshaped(&self, shape: Vec<usize>) -> Result<Tensor> {
        Tensor::new(shape, self.data.clone())
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Tensor {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|&x| f(x)).collect() }
    }

    pub fn ensure_finite(&self, op: &'static str) -> Result<()> {
        if self.data.iter().all(|x| x.is_finite()) {
            Ok(())
        } else {
            Err(GcError::NonFinite(op))
        }
    }

    /// Row-major strides for this shape.
    pub fn strides(&self) -> Vec<usize> {
        strides_of(&self.shape)
    }
}

pub(crate) fn strides_of(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1usize; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Numpy-style broadcast of two shapes, aligned on trailing dimensions.
pub(crate) fn broadcast_shapes(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0usize; rank];
    for i in 0..rank {
        let da = if i < rank - a.len() { 1 } else { a[i - (rank - a.len())] };
        let db = if i < rank - b.len() { 1 } else { b[i - (rank - b.len())] };
        out[i] = if da == db || db == 1 {
            da
        } else if da == 1 {
            db
        } else {
            return Err(GcError::ShapeMismatch {
                op,
                detail: format!("cannot broadcast {:?} with {:?}", a, b),
            });
        };
    }
    Ok(out)
}

/// Strides into `shape`'s buffer when indexed by `out` coordinates;
/// broadcast dimensions get stride 0.
fn broadcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let own = strides_of(shape);
    let offset = out.len() - shape.len();
    let mut s = vec![0usize; out.len()];
    for i in 0..shape.len() {
        s[offset + i] = if shape[i] == 1 && out[offset + i] != 1 { 0 } else { own[i] };
    }
    s
}

/// Elementwise binary op with numpy broadcast semantics.
pub(crate) fn binary_broadcast(
    op: &'static str,
    a: &Tensor,
    b: &Tensor,
    f: impl Fn(f32, f32) -> f32,
) -> Result<Tensor> {
    if a.shape == b.shape {
        let data = a.data.iter().zip(&b.data).map(|(&x, &y)| f(x, y)).collect();
        return Ok(Tensor { shape: a.shape.clone(), data });
    }
    let out_shape = broadcast_shapes(op, &a.shape, &b.shape)?;
    let n: usize = out_shape.iter().product();
    let sa = broadcast_strides(&a.shape, &out_shape);
    let sb = broadcast_strides(&b.shape, &out_shape);
    let mut data = Vec::with_capacity(n);
    let mut idx = vec![0usize; out_shape.len()];
    let mut oa = 0usize;
    let mut ob = 0usize;
    for _ in 0..n {
        data.push(f(a.data[oa], b.data[ob]));
        // odometer increment over the output coordinates
        for d in (0..out_shape.len()).rev() {
            idx[d] += 1;
            oa += sa[d];
            ob += sb[d];
            if idx[d] < out_shape[d] {
                break;
            }
            idx[d] = 0;
            oa -= sa[d] * out_shape[d];
            ob -= sb[d] * out_shape[d];
        }
    }
    Ok(Tensor { shape: out_shape, data })
}

/// Sum `g` down to `target` shape, inverting a broadcast (used by gradients
/// of broadcast ops: the gradient of each source element is the sum over all
/// output positions it was expanded into).
pub(crate) fn reduce_to_shape(g: &Tensor, target: &[usize]) -> Tensor {
    if g.shape == target {
        return g.clone();
    }
    let mut out = Tensor::zeros(target);
    let st = broadcast_strides(target, &g.shape);
    let mut idx = vec![0usize; g.shape.len()];
    let mut ot = 0usize;
    for i in 0..g.data.len() {
        out.data[ot] += g.data[i];
        for d in (0..g.shape.len()).rev() {
            idx[d] += 1;
            ot += st[d];
            if idx[d] < g.shape[d] {
                break;
            }
            idx[d] = 0;
            ot -= st[d] * g.shape[d];
        }
    }
    out
}

/// C = alpha * A @ B + beta * C for row-major slices, with optional
/// transposes expressed through strides (no materialized transpose).
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    trans_a: bool,
    b: &[f32],
    trans_b: bool,
    c: &mut [f32],
    accumulate: bool,
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { 1.0 } else { 0.0 };
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
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

const GELU_C0: f32 = 0.797_884_6; // sqrt(2/pi)
const GELU_C1: f32 = 0.044715;

/// GELU with the tanh approximation (the same form is used in training and
/// in the exported graph runtime so outputs match bit-for-bit).
pub(crate) fn gelu_scalar(x: f32) -> f32 {
    let u = GELU_C0 * (x + GELU_C1 * x * x * x);
    0.5 * x * (1.0 + u.tanh())
}

pub(crate) fn gelu_deriv(x: f32) -> f32 {
    let u = GELU_C0 * (x + GELU_C1 * x * x * x);
    let t = u.tanh();
    let sech2 = 1.0 - t * t;
    0.5 * (1.0 + t) + 0.5 * x * sech2 * GELU_C0 * (1.0 + 3.0 * GELU_C1 * x * x)
}

/// Numerically stable softmax over each contiguous row of `cols` elements.
pub(crate) fn softmax_rows(data: &mut [f32], cols: usize) {
    for row in data.chunks_mut(cols) {
        let max = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
}

/// Mean/biased-variance normalization of each row, then affine gain/bias.
pub(crate) fn layer_norm_rows(x: &[f32], cols: usize, gain: &[f32], bias: &[f32], eps: f32, out: &mut [f32]) {
    for (row, orow) in x.chunks(cols).zip(out.chunks_mut(cols)) {
        let mean = row.iter().sum::<f32>() / cols as f32;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / cols as f32;
        let inv = 1.0 / (var + eps).sqrt();
        for j in 0..cols {
            orow[j] = (row[j] - mean) * inv * gain[j] + bias[j];
        }
    }
}

/// Copy of `t` with dimensions `d0` and `d1` swapped.
pub(crate) fn transpose_copy(t: &Tensor, d0: usize, d1: usize) -> Tensor {
    let mut shape = t.shape.clone();
    shape.swap(d0, d1);
    let in_strides = t.strides();
    let mut src_strides = in_strides.clone();
    src_strides.swap(d0, d1);
    let n = t.numel();
    let mut data = Vec::with_capacity(n);
    let mut idx = vec![0usize; shape.len()];
    let mut off = 0usize;
    for _ in 0..n {
        data.push(t.data[off]);
        for d in (0..shape.len()).rev() {
            idx[d] += 1;
            off += src_strides[d];
            if idx[d] < shape[d] {
                break;
            }
            idx[d] = 0;
            off -= src_strides[d] * shape[d];
        }
    }
    Tensor { shape, data }
}
