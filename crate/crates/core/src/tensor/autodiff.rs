//! Reverse-mode automatic differentiation.
//!
//! A [`Var`] wraps a [`Tensor`] value together with an optional gradient.
//! Ops are methods on [`Tape`]: each one computes the output eagerly and, if
//! the tape is recording and any input requires a gradient, pushes a backward
//! closure. [`Tape::backward`] replays the closures in reverse — since ops
//! were recorded in execution order this is a valid topological order, and
//! each node's backward runs exactly once.

use std::cell::RefCell;
use std::rc::Rc;

use rand::Rng;

use super::{
    binary_broadcast, gemm, gelu_deriv, gelu_scalar, layer_norm_rows,
    reduce_to_shape, softmax_rows, transpose_copy, Tensor,
};
use crate::error::{GcError, Result};

struct VarData {
    value: Tensor,
    grad: Option<Tensor>,
    requires_grad: bool,
}

/// A tensor tracked by the autodiff engine. Cheaply clonable handle.
#[derive(Clone)]
pub struct Var {
    inner: Rc<RefCell<VarData>>,
}

impl Var {
    pub fn new(value: Tensor, requires_grad: bool) -> Var {
        Var { inner: Rc::new(RefCell::new(VarData { value, grad: None, requires_grad })) }
    }

    /// Input or frozen tensor: participates in forward only.
    pub fn constant(value: Tensor) -> Var {
        Var::new(value, false)
    }

    /// Trainable parameter.
    pub fn param(value: Tensor) -> Var {
        Var::new(value, true)
    }

    pub fn value(&self) -> Tensor {
        self.inner.borrow().value.clone()
    }

    pub fn with_value<R>(&self, f: impl FnOnce(&Tensor) -> R) -> R {
        f(&self.inner.borrow().value)
    }

    pub fn with_value_mut<R>(&self, f: impl FnOnce(&mut Tensor) -> R) -> R {
        f(&mut self.inner.borrow_mut().value)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.inner.borrow().value.shape().to_vec()
    }

    pub fn item(&self) -> f32 {
        self.inner.borrow().value.item()
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.borrow().requires_grad
    }

    pub fn grad(&self) -> Option<Tensor> {
        self.inner.borrow().grad.clone()
    }

    pub fn zero_grad(&self) {
        self.inner.borrow_mut().grad = None;
    }

    pub(super) fn accumulate_grad(&self, contrib: &Tensor) {
        let mut d = self.inner.borrow_mut();
        match &mut d.grad {
            Some(g) => {
                debug_assert_eq!(g.shape(), contrib.shape());
                for (gi, ci) in g.data_mut().iter_mut().zip(contrib.data()) {
                    *gi += ci;
                }
            }
            None => d.grad = Some(contrib.clone()),
        }
    }

    pub(super) fn with_grad<R>(&self, f: impl FnOnce(Option<&Tensor>) -> R) -> R {
        f(self.inner.borrow().grad.as_ref())
    }
}

type BackwardStep = Box<dyn FnOnce()>;

/// Records backward closures for one forward pass.
pub struct Tape {
    steps: RefCell<Vec<BackwardStep>>,
    recording: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Tape::new()
    }
}

impl Tape {
    /// Tape that records gradients (training).
    pub fn new() -> Tape {
        Tape { steps: RefCell::new(Vec::new()), recording: true }
    }

    /// Non-recording tape: same ops, no backward closures (evaluation).
    pub fn inference() -> Tape {
        Tape { steps: RefCell::new(Vec::new()), recording: false }
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    pub fn num_steps(&self) -> usize {
        self.steps.borrow().len()
    }

    pub(super) fn record(&self, out: &Var, f: impl FnOnce() + 'static) {
        if self.recording && out.requires_grad() {
            self.steps.borrow_mut().push(Box::new(f));
        }
    }

    /// Seed `loss` (a single-element tensor) with gradient 1 and replay all
    /// recorded steps in reverse. Consumes the recorded steps, so one
    /// backward per forward pass.
    pub fn backward(&self, loss: &Var) -> Result<()> {
        if !self.recording {
            return Err(GcError::InvalidInput("backward on a non-recording tape".into()));
        }
        {
            let d = loss.inner.borrow();
            if d.value.numel() != 1 {
                return Err(GcError::ShapeMismatch {
                    op: "backward",
                    detail: format!("loss must be a scalar, got shape {:?}", d.value.shape()),
                });
            }
            if !d.requires_grad {
                return Err(GcError::InvalidInput(
                    "backward on a value that does not require gradients".into(),
                ));
            }
        }
        loss.accumulate_grad(&Tensor::full(&loss.shape(), 1.0));
        let steps = std::mem::take(&mut *self.steps.borrow_mut());
        for step in steps.into_iter().rev() {
            step();
        }
        Ok(())
    }

    fn out_of(&self, value: Tensor, inputs: &[&Var]) -> Var {
        let rg = self.recording && inputs.iter().any(|v| v.requires_grad());
        Var::new(value, rg)
    }

    // ---- elementwise / broadcast ----

    /// Elementwise sum with numpy-style trailing broadcast.
    pub fn add(&self, a: &Var, b: &Var) -> Result<Var> {
        let value = a.with_value(|av| b.with_value(|bv| binary_broadcast("add", av, bv, |x, y| x + y)))?;
        value.ensure_finite("add")?;
        let out = self.out_of(value, &[a, b]);
        let (a, b, o) = (a.clone(), b.clone(), out.clone());
        self.record(&out, move || {
            o.with_grad(|g| {
                let g = match g {
                    Some(g) => g,
                    None => return,
                };
                if a.requires_grad() {
                    let contrib = a.with_value(|av| reduce_to_shape(g, av.shape()));
                    a.accumulate_grad(&contrib);
                }
                if b.requires_grad() {
                    let contrib = b.with_value(|bv| reduce_to_shape(g, bv.shape()));
                    b.accumulate_grad(&contrib);
                }
            });
        });
        Ok(out)
    }

    /// Elementwise product with numpy-style trailing broadcast.
    pub fn mul(&self, a: &Var, b: &Var) -> Result<Var> {
        let value = a.with_value(|av| b.with_value(|bv| binary_broadcast("mul", av, bv, |x, y| x * y)))?;
        value.ensure_finite("mul")?;
        let out = self.out_of(value, &[a, b]);
        let (a, b, o) = (a.clone(), b.clone(), out.clone());
        self.record(&out, move || {
            let g = match o.with_grad(|g| g.cloned()) {
                Some(g) => g,
                None => return,
            };
            if a.requires_grad() {
                let contrib = {
                    let full = b
                        .with_value(|bv| binary_broadcast("mul_bwd", &g, bv, |x, y| x * y))
                        .expect("shapes validated in forward");
                    a.with_value(|av| reduce_to_shape(&full, av.shape()))
                };
                a.accumulate_grad(&contrib);
            }
            if b.requires_grad() {
                let contrib = {
                    let full = a
                        .with_value(|av| binary_broadcast("mul_bwd", &g, av, |x, y| x * y))
                        .expect("shapes validated in forward");
                    b.with_value(|bv| reduce_to_shape(&full, bv.shape()))
                };
                b.accumulate_grad(&contrib);
            }
        });
        Ok(out)
    }

    /// Multiply by a compile-time constant.
    pub fn scale(&self, x: &Var, c: f32) -> Result<Var> {
        let value = x.with_value(|xv| xv.map(|v| v * c));
        value.ensure_finite("scale")?;
        let out = self.out_of(value, &[x]);
        let (x, o) = (x.clone(), out.clone());
        self.record(&out, move || {
            o.with_grad(|g| {
                if let Some(g) = g {
                    x.accumulate_grad(&g.map(|v| v * c));
                }
            });
        });
        Ok(out)
    }

    pub fn sub(&self, a: &Var, b: &Var) -> Result<Var> {
        let neg = self.scale(b, -1.0)?;
        self.add(a, &neg)
    }

    // ---- matmul ----

    /// Batched matrix product `a @ b`. `a` is `[..., m, k]`; `b` is either
    /// 2-D (shared across leading dims) or has the same leading dims as `a`.
    pub fn matmul(&self, a: &Var, b: &Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// `a @ b^T` with the transpose folded into the kernel's strides; `b` is
    /// `[n, k]` (or batched `[..., n, k]`). This is the natural layout for
    /// linear layers whose weights are stored `(out_features, in_features)`.
    pub fn matmul_transb(&self, a: &Var, b: &Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&self, a: &Var, b: &Var, trans_b: bool) -> Result<Var> {
        let (m, k, n, batch, shared_b, out_shape) =
            a.with_value(|av| b.with_value(|bv| matmul_dims(av.shape(), bv.shape(), trans_b)))?;
        let mut out = Tensor::zeros(&out_shape);
        a.with_value(|av| {
            b.with_value(|bv| {
                for i in 0..batch {
                    let asl = &av.data()[i * m * k..(i + 1) * m * k];
                    let boff = if shared_b { 0 } else { i * k * n };
                    let bsl = &bv.data()[boff..boff + k * n];
                    let csl = &mut out.data_mut()[i * m * n..(i + 1) * m * n];
                    gemm(m, k, n, asl, false, bsl, trans_b, csl, false);
                }
            })
        });
        out.ensure_finite("matmul")?;
        let out = self.out_of(out, &[a, b]);
        let (a, b, o) = (a.clone(), b.clone(), out.clone());
        self.record(&out, move || {
            let g = match o.with_grad(|g| g.cloned()) {
                Some(g) => g,
                None => return,
            };
            if a.requires_grad() {
                let mut ga = Tensor::zeros(&a.shape());
                b.with_value(|bv| {
                    for i in 0..batch {
                        let gsl = &g.data()[i * m * n..(i + 1) * m * n];
                        let boff = if shared_b { 0 } else { i * k * n };
                        let bsl = &bv.data()[boff..boff + k * n];
                        let gasl = &mut ga.data_mut()[i * m * k..(i + 1) * m * k];
                        // y = a@b   -> ga = g @ b^T
                        // y = a@b^T -> ga = g @ b
                        gemm(m, n, k, gsl, false, bsl, !trans_b, gasl, false);
                    }
                });
                a.accumulate_grad(&ga);
            }
            if b.requires_grad() {
                let mut gb = Tensor::zeros(&b.shape());
                a.with_value(|av| {
                    for i in 0..batch {
                        let gsl = &g.data()[i * m * n..(i + 1) * m * n];
                        let asl = &av.data()[i * m * k..(i + 1) * m * k];
                        let boff = if shared_b { 0 } else { i * k * n };
                        let gbsl = &mut gb.data_mut()[boff..boff + k * n];
                        if trans_b {
                            // y = a@b^T -> gb = g^T @ a, accumulated over batch
                            gemm(n, m, k, gsl, true, asl, false, gbsl, true);
                        } else {
                            // y = a@b -> gb = a^T @ g, accumulated over batch
                            gemm(k, m, n, asl, true, gsl, false, gbsl, true);
                        }
                    }
                });
                b.accumulate_grad(&gb);
            }
        });
        Ok(out)
    }

    /// `x @ w^T + bias` — the standard dense layer.
    pub fn linear(&self, x: &Var, w: &Var, bias: &Var) -> Result<Var> {
        let y = self.matmul_transb(x, w)?;
        self.add(&y, bias)
    }

    // ---- shape ops ----

    pub fn transpose(&self, x: &Var, d0: usize, d1: usize) -> Result<Var> {
        let rank = x.shape().len();
        if d0 >= rank || d1 >= rank {
            return Err(GcError::ShapeMismatch {
                op: "transpose",
                detail: format!("axes ({d0},{d1}) out of range for rank {rank}"),
            });
        }
        let value = x.with_value(|xv| transpose_copy(xv, d0, d1));
        let out = self.out_of(value, &[x]);
        let (x, o) = (x.clone(), out.clone());
        self.record(&out, move || {
            o.with_grad(|g| {
                if let Some(g) = g {
                    x.accumulate_grad(&transpose_copy(g, d0, d1));
                }
            });
        });
        Ok(out)
    }

    pub fn reshape(&self, x: &Var, shape: Vec<usize>) -> Result<Var> {
        let in_shape = x.shape();
        let value = x.with_value(|xv| xv.reshaped(shape))?;
        let out = self.out_of(value, &[x]);
        let (x, o) = (x.clone(), out.clone());
        self.record(&out, move || {
            o.with_grad(|g| {
                if let Some(g) = g {
                    let back = g.reshaped(in_shape.clone()).expect("same element count");
                    x.accumulate_grad(&back);
                }
            });
        });
        Ok(out)
    }

    /// Contiguous sub-range `[start, start+len)` along `axis`.
    pub fn slice(&self, x: &Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let in_shape = x.shape();
        if axis >= in_shape.len() || start + len > in_shape[axis] {
            return Err(GcError::ShapeMismatch {
                op: "slice",
                detail: format!("range {start}..{} on axis {axis} of {:?}", start + len, in_shape),
            });
        }
        let outer: usize = in_shape[..axis].iter().product();
        let inner: usize = in_shape[axis + 1..].iter().product();
        let axis_n = in_shape[axis];
        let mut out_shape = in_shape.clone();
        out_shape[axis] = len;
        let mut data = Vec::with_capacity(outer * len * inner);
        x.with_value(|xv| {
            for o in 0..outer {
                let base = o * axis_n * inner + start * inner;
                data.extend_from_slice(&xv.data()[base..base + len * inner]);
            }
        });
        let out = self.out_of(Tensor::new(out_shape, data)?, &[x]);
        let (x, o) = (x.clone(), out.clone());
        self.record(&out, move || {
            o.with_grad(|g| {
                if let Some(g) = g {
                    let mut back = Tensor::zeros(&in_shape);
                    for oi in 0..outer {
                        let dst = oi * axis_n * inner + start * inner;
                        let src = oi * len * inner;
                        back.data_mut()[dst..dst + len * inner]
                            .copy_from_slice(&g.data()[src..src + len * inner]);
                    }
                    x.accumulate_grad(&back);
                }
            });
        });
        Ok(out)
    }

    /// Concatenate along `axis`; all other dimensions must match.
    pub fn concat(&self, xs: &[&Var], axis: usize) -> Result<Var> {
        if xs.is_empty() {
            return Err(GcError::InvalidInput("concat of zero tensors".into()));
        }
        let first = xs[0].shape();
        if axis >= first.len() {
            return Err(GcError::ShapeMismatch {
                op: "concat",
                detail: format!("axis {axis} out of range for rank {}", first.len()),
            });
        }
        let mut axis_total = 0;
        for x in xs {
            let s = x.shape();
            if s.len() != first.len()
                || s.iter().zip(&first).enumerate().any(|(d, (a, b))| d != axis && a != b)
            {
                return Err(GcError::ShapeMismatch {
                    op: "concat",
                    detail: format!("incompatible shapes {:?} and {:?}", first, s),
                });
            }
            axis_total += s[axis];
        }
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut out_shape = first.clone();
        out_shape[axis] = axis_total;
        let mut data = vec![0.0f32; outer * axis_total * inner];
        let mut offset = 0;
        let mut spans = Vec::with_capacity(xs.len());
        for x in xs {
            let len = x.shape()[axis];
            x.with_value(|xv| {
                for o in 0..outer {
                    let dst = o * axis_total * inner + offset * inner;
                    let src = o * len * inner;
                    data[dst..dst + len * inner].copy_from_slice(&xv.data()[src..src + len * inner]);
                }
            });
            spans.push((offset, len));
            offset += len;
        }
        let out = self.out_of(Tensor::new(out_shape, data)?, &xs.iter().copied().collect::<Vec<_>>());
        let parts: Vec<Var> = xs.iter().map(|x| (*x).clone()).collect();
        let o = out.clone();
        self.record(&out, move || {
            let g = match o.with_grad(|g| g.cloned()) {
                Some(g) => g,
                None => return,
            };
            for (x, (offset, len)) in parts.iter().zip(&spans) {
                if !x.requires_grad() {
                    continue;
                }
                let mut shape = x.shape();
                shape[axis] = *len;
                let mut back = Tensor::zeros(&shape);
                for oi in 0..outer {
                    let src = oi * axis_total * inner + offset * inner;
                    let dst = oi * len * inner;
                    back.data_mut()[dst..dst + len * inner]
                        .copy_from_slice(&g.data()[src..src + len * inner]);
                }
                x.accumulate_grad(&back);
            }
        });
        Ok(out)
    }

    // ---- embedding ----

    /// Row lookup `table[ids]`; output is `prefix_shape x hidden`. The
    /// backward pass scatter-adds output gradients into the looked-up rows.
    pub fn gather(&self, table: &Var, ids: &[usize], prefix_shape: &[usize]) -> Result<Var> {
        let tshape = table.shape();
        if tshape.len() != 2 {
            return Err(GcError::ShapeMismatch {
                op: "gather",
                detail: format!("table must be 2-D, got {:?}", tshape),
            });
        }
        let (rows, hidden) = (tshape[0], tshape[1]);
        let count: usize = prefix_shape.iter().product();
        if count != ids.len() {
            return Err(GcError::ShapeMismatch {
                op: "gather",
                detail: format!("{} ids but prefix shape {:?}", ids.len(), prefix_shape),
            });
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= rows) {
            return Err(GcError::InvalidInput(format!("gather id {bad} out of range ({rows} rows)")));
        }
        let mut data = Vec::with_capacity(ids.len() * hidden);
        table.with_value(|tv| {
            for &id in ids {
                data.extend_from_slice(&tv.data()[id * hidden..(id + 1) * hidden]);
            }
        });
        let mut out_shape = prefix_shape.to_vec();
        out_shape.push(hidden);
        let out = self.out_of(Tensor::new(out_shape, data)?, &[table]);
        let (table, o) = (table.clone(), out.clone());
        let ids = ids.to_vec();
        self.record(&out, move || {
            o.with_grad(|g| {
                if let Some(g) = g {
                    let mut back = Tensor::zeros(&[rows, hidden]);
                    for (i, &id) in ids.iter().enumerate() {
                        let src = &g.data()[i * hidden..(i + 1) * hidden];
                        let dst = &mut back.data_mut()[id * hidden..(id + 1) * hidden];
                        for (d, s) in dst.iter_mut().zip(src) {
                            *d += s;
                        }
                    }
                    table.accumulate_grad(&back);
                }
            });
        });
        Ok(out)
    }

    // ---- normalization / activations ----

    /// Layer normalization over the last dimension with learned gain/bias.
    pub fn layer_norm(&self, x: &Var, gain: &Var, bias: &Var, eps: f32) -> Result<Var> {
        let shape = x.shape();
        let cols = *shape.last().ok_or_else(|| GcError::ShapeMismatch {
            op: "layer_norm",
            detail: "rank-0 input".into(),
        })?;
        if gain.shape() != [cols] || bias.shape() != [cols] {
            return Err(GcError::ShapeMismatch {
                op: "layer_norm",
                detail: format!(
                    "gain {:?} / bias {:?} must both be [{cols}]",
                    gain.shape(),
                    bias.shape()
                ),
            });
        }
        let mut out = Tensor::zeros(&shape);
        x.with_value(|xv| {
            gain.with_value(|gv| {
                bias.with_value(|bv| {
                    layer_norm_rows(xv.data(), cols, gv.data(), bv.data(), eps, out.data_mut())
                })
            })
        });
        out.ensure_finite("layer_norm")?;
        let out = self.out_of(out, &[x, gain, bias]);
        let (x, gain, bias, o) = (x.clone(), gain.clone(), bias.clone(), out.clone());
        self.record(&out, move || {
            let g = match o.with_grad(|g| g.cloned()) {
                Some(g) => g,
                None => return,
            };
            let n = cols as f32;
            let (gx, ggain, gbias) = x.with_value(|xv| {
                gain.with_value(|gv| {
                    let mut gx = Tensor::zeros(xv.shape());
                    let mut ggain = vec![0.0f32; cols];
                    let mut gbias = vec![0.0f32; cols];
                    for (r, row) in xv.data().chunks(cols).enumerate() {
                        let grow = &g.data()[r * cols..(r + 1) * cols];
                        let mean = row.iter().sum::<f32>() / n;
                        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / n;
                        let inv = 1.0 / (var + eps).sqrt();
                        let mut dvar = 0.0f32;
                        let mut dmean = 0.0f32;
                        for j in 0..cols {
                            let xc = row[j] - mean;
                            let dxhat = grow[j] * gv.data()[j];
                            ggain[j] += grow[j] * xc * inv;
                            gbias[j] += grow[j];
                            dvar += dxhat * xc * -0.5 * inv * inv * inv;
                            dmean += -dxhat * inv;
                        }
                        let sum_xc: f32 = row.iter().map(|v| v - mean).sum();
                        dmean += dvar * -2.0 * sum_xc / n;
                        let gxrow = &mut gx.data_mut()[r * cols..(r + 1) * cols];
                        for j in 0..cols {
                            let xc = row[j] - mean;
                            let dxhat = grow[j] * gv.data()[j];
                            gxrow[j] = dxhat * inv + dvar * 2.0 * xc / n + dmean / n;
                        }
                    }
                    (gx, ggain, gbias)
                })
            });
            if x.requires_grad() {
                x.accumulate_grad(&gx);
            }
            if gain.requires_grad() {
                gain.accumulate_grad(&Tensor::new(vec![cols], ggain).unwrap());
            }
            if bias.requires_grad() {
                bias.accumulate_grad(&Tensor::new(vec![cols], gbias).unwrap());
            }
        });
        Ok(out)
    }

    /// GELU activation (tanh approximation).
    pub fn gelu(&self, x: &Var) -> Result<Var> {
        let value = x.with_value(|xv| xv.map(gelu_scalar));
        value.ensure_finite("gelu")?;
        let out = self.out_of(value, &[x]);
        let (x, o) = (x.clone(), out.clone());
        self.record(&out, move || {
            o.with_grad(|g| {
                if let Some(g) = g {
                    let contrib = x.with_value(|xv| {
                        let mut c = xv.map(gelu_deriv);
                        for (ci, gi) in c.data_mut().iter_mut().zip(g.data()) {
                            *ci *= gi;
                        }
                        c
                    });
                    x.accumulate_grad(&contrib);
                }
            });
        });
        Ok(out)
    }

    pub fn tanh(&self, x: &Var) -> Result<Var> {
        let value = x.with_value(|xv| xv.map(f32::tanh));
        let out = self.out_of(value, &[x]);
        let (x, o) = (x.clone(), out.clone());
        self.record(&out, move || {
            // d tanh = 1 - tanh^2, read from the saved output
            let contrib = o.with_grad(|g| {
                g.map(|g| {
                    o.with_value(|yv| {
                        let mut c = yv.map(|y| 1.0 - y * y);
                        for (ci, gi) in c.data_mut().iter_mut().zip(g.data()) {
                            *ci *= gi;
                        }
                        c
                    })
                })
            });
            if let Some(contrib) = contrib {
                x.accumulate_grad(&contrib);
            }
        });
        Ok(out)
    }

    /// Softmax over the last dimension.
    pub fn softmax(&self, x: &Var) -> Result<Var> {
        let shape = x.shape();
        let cols = *shape.last().ok_or_else(|| GcError::ShapeMismatch {
            op: "softmax",
            detail: "rank-0 input".into(),
        })?;
        let mut value = x.value();
        softmax_rows(value.data_mut(), cols);
        value.ensure_finite("softmax")?;
        let out = self.out_of(value, &[x]);
        let (x, o) = (x.clone(), out.clone());
        self.record(&out, move || {
            let contrib = o.with_grad(|g| {
                g.map(|g| {
                    o.with_value(|yv| {
                        let mut c = Tensor::zeros(yv.shape());
                        for r in 0..yv.numel() / cols {
                            let y = &yv.data()[r * cols..(r + 1) * cols];
                            let gr = &g.data()[r * cols..(r + 1) * cols];
                            let dot: f32 = y.iter().zip(gr).map(|(a, b)| a * b).sum();
                            let cr = &mut c.data_mut()[r * cols..(r + 1) * cols];
                            for j in 0..cols {
                                cr[j] = y[j] * (gr[j] - dot);
                            }
                        }
                        c
                    })
                })
            });
            if let Some(contrib) = contrib {
                x.accumulate_grad(&contrib);
            }
        });
        Ok(out)
    }

    /// Inverted dropout: keeps each element with probability `1-p` and scales
    /// survivors by `1/(1-p)` so expectations match. Callers skip this op
    /// entirely in evaluation mode; `p = 0` is the identity.
    pub fn dropout<R: Rng>(&self, x: &Var, p: f32, rng: &mut R) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(GcError::InvalidConfig(format!("dropout rate {p} outside [0, 1)")));
        }
        if p == 0.0 {
            return Ok(x.clone());
        }
        let keep = 1.0 / (1.0 - p);
        let mask: Vec<f32> = x
            .with_value(|xv| (0..xv.numel()).map(|_| if rng.gen::<f32>() < p { 0.0 } else { keep }).collect());
        let value = x.with_value(|xv| {
            let mut v = xv.clone();
            for (vi, mi) in v.data_mut().iter_mut().zip(&mask) {
                *vi *= mi;
            }
            v
        });
        let out = self.out_of(value, &[x]);
        let (x, o) = (x.clone(), out.clone());
        self.record(&out, move || {
            o.with_grad(|g| {
                if let Some(g) = g {
                    let mut contrib = g.clone();
                    for (ci, mi) in contrib.data_mut().iter_mut().zip(&mask) {
                        *ci *= mi;
                    }
                    x.accumulate_grad(&contrib);
                }
            });
        });
        Ok(out)
    }
}

/// Validates matmul operand shapes; returns (m, k, n, batch, shared_b, out_shape).
pub(crate) fn matmul_dims(
    a: &[usize],
    b: &[usize],
    trans_b: bool,
) -> Result<(usize, usize, usize, usize, bool, Vec<usize>)> {
    let err = |detail: String| GcError::ShapeMismatch { op: "matmul", detail };
    if a.len() < 2 || b.len() < 2 {
        return Err(err(format!("operands must be at least 2-D, got {:?} and {:?}", a, b)));
    }
    let (m, k) = (a[a.len() - 2], a[a.len() - 1]);
    let (bk, bn) = if trans_b {
        (b[b.len() - 1], b[b.len() - 2])
    } else {
        (b[b.len() - 2], b[b.len() - 1])
    };
    if k != bk {
        return Err(err(format!("inner dims disagree: {:?} x {:?} (trans_b={})", a, b, trans_b)));
    }
    let shared_b = b.len() == 2;
    if !shared_b && b[..b.len() - 2] != a[..a.len() - 2] {
        return Err(err(format!("leading dims disagree: {:?} x {:?}", a, b)));
    }
    let batch: usize = a[..a.len() - 2].iter().product();
    let mut out_shape = a[..a.len() - 2].to_vec();
    out_shape.push(m);
    out_shape.push(bn);
    Ok((m, k, bn, batch, shared_b, out_shape))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn var(shape: &[usize], data: &[f32]) -> Var {
        Var::param(Tensor::new(shape.to_vec(), data.to_vec()).unwrap())
    }

    #[test]
    fn add_broadcast_backward_reduces() {
        let t = Tape::new();
        let a = var(&[2, 2], &[1., 2., 3., 4.]);
        let b = var(&[2], &[10., 20.]);
        let y = t.add(&a, &b).unwrap();
        assert_eq!(y.value().data(), &[11., 22., 13., 24.]);
        // reduce to scalar by multiplying with a weight vector twice
        let w = Var::constant(Tensor::new(vec![2, 2], vec![1., 1., 1., 1.]).unwrap());
        let prod = t.mul(&y, &w).unwrap();
        let flat = t.reshape(&prod, vec![1, 4]).unwrap();
        let ones = Var::constant(Tensor::new(vec![4, 1], vec![1.; 4]).unwrap());
        let s = t.matmul(&flat, &ones).unwrap();
        let s = t.reshape(&s, vec![1]).unwrap();
        t.backward(&s).unwrap();
        assert_eq!(a.grad().unwrap().data(), &[1., 1., 1., 1.]);
        assert_eq!(b.grad().unwrap().data(), &[2., 2.]);
    }

    #[test]
    fn same_var_both_operands() {
        // y = x * x, dy/dx = 2x — exercises the aliased-input path
        let t = Tape::new();
        let x = var(&[1], &[3.0]);
        let y = t.mul(&x, &x).unwrap();
        t.backward(&y).unwrap();
        assert_eq!(y.value().item(), 9.0);
        assert_eq!(x.grad().unwrap().item(), 6.0);
    }

    #[test]
    fn matmul_shared_and_batched() {
        let t = Tape::new();
        let a = var(&[2, 2, 3], &[1., 2., 3., 4., 5., 6., 1., 0., 0., 0., 1., 0.]);
        let b = var(&[3, 2], &[7., 8., 9., 10., 11., 12.]);
        let y = t.matmul(&a, &b).unwrap();
        assert_eq!(y.shape(), vec![2, 2, 2]);
        assert_eq!(&y.value().data()[..4], &[58., 64., 139., 154.]);
        assert_eq!(&y.value().data()[4..], &[7., 8., 9., 10.]);
    }

    #[test]
    fn matmul_transb_matches_explicit_transpose() {
        let t = Tape::new();
        let a = var(&[2, 3], &[1., 2., 3., 4., 5., 6.]);
        let bt = var(&[2, 3], &[7., 9., 11., 8., 10., 12.]);
        let y1 = t.matmul_transb(&a, &bt).unwrap();
        let b = t.transpose(&bt, 0, 1).unwrap();
        let y2 = t.matmul(&a, &b).unwrap();
        assert_eq!(y1.value().data(), y2.value().data());
    }

    #[test]
    fn gather_scatter_adds_duplicate_ids() {
        let t = Tape::new();
        let table = var(&[3, 2], &[1., 2., 3., 4., 5., 6.]);
        let y = t.gather(&table, &[2, 0, 2], &[3]).unwrap();
        assert_eq!(y.value().data(), &[5., 6., 1., 2., 5., 6.]);
        let flat = t.reshape(&y, vec![1, 6]).unwrap();
        let ones = Var::constant(Tensor::new(vec![6, 1], vec![1.; 6]).unwrap());
        let s = t.reshape(&t.matmul(&flat, &ones).unwrap(), vec![1]).unwrap();
        t.backward(&s).unwrap();
        // row 2 looked up twice -> gradient 2 per element
        assert_eq!(table.grad().unwrap().data(), &[1., 1., 0., 0., 2., 2.]);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let t = Tape::inference();
        let x = var(&[2, 3], &[1., 2., 3., 1000., 1000., 1000.]);
        let y = t.softmax(&x).unwrap();
        let d = y.value();
        assert!((d.data()[0..3].iter().sum::<f32>() - 1.0).abs() < 1e-6);
        assert!((d.data()[3] - 1.0 / 3.0).abs() < 1e-6);
    }

    #[test]
    fn dropout_identity_at_zero_and_masks_otherwise() {
        use rand::SeedableRng;
        let t = Tape::new();
        let x = var(&[1, 100], &[1.0; 100]);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let y0 = t.dropout(&x, 0.0, &mut rng).unwrap();
        assert_eq!(y0.value().data(), x.value().data());
        let y = t.dropout(&x, 0.5, &mut rng).unwrap();
        let v = y.value();
        let kept = v.data().iter().filter(|&&a| a != 0.0).count();
        assert!(v.data().iter().all(|&a| a == 0.0 || (a - 2.0).abs() < 1e-6));
        assert!(kept > 20 && kept < 80);
    }

    #[test]
    fn inference_tape_records_nothing() {
        let t = Tape::inference();
        let a = var(&[2], &[1., 2.]);
        let b = var(&[2], &[3., 4.]);
        let _ = t.add(&a, &b).unwrap();
        assert_eq!(t.num_steps(), 0);
        assert!(t.backward(&a).is_err());
    }

    #[test]
    fn non_finite_forward_is_an_error() {
        let t = Tape::new();
        let a = var(&[1], &[f32::MAX]);
        let err = t.mul(&a, &a);
        assert!(matches!(err, Err(GcError::NonFinite(_))));
    }

    #[test]
    fn backward_runs_each_node_once() {
        // diamond: y = (x+x) * (x+x); dy/dx must be 8x, not more
        let t = Tape::new();
        let x = var(&[1], &[2.0]);
        let s = t.add(&x, &x).unwrap();
        let y = t.mul(&s, &s).unwrap();
        t.backward(&y).unwrap();
        assert_eq!(y.value().item(), 16.0);
        assert_eq!(x.grad().unwrap().item(), 16.0); // 8x = 16
    }

    #[test]
    fn slice_concat_roundtrip_gradients() {
        let t = Tape::new();
        let x = var(&[2, 4], &[0., 1., 2., 3., 4., 5., 6., 7.]);
        let a = t.slice(&x, 1, 0, 2).unwrap();
        let b = t.slice(&x, 1, 2, 2).unwrap();
        let y = t.concat(&[&b, &a], 1).unwrap();
        assert_eq!(y.value().data(), &[2., 3., 0., 1., 6., 7., 4., 5.]);
        let w = Var::constant(Tensor::new(vec![2, 4], (1..=8).map(|i| i as f32).collect()).unwrap());
        let p = t.mul(&y, &w).unwrap();
        let flat = t.reshape(&p, vec![1, 8]).unwrap();
        let ones = Var::constant(Tensor::new(vec![8, 1], vec![1.; 8]).unwrap());
        let s = t.reshape(&t.matmul(&flat, &ones).unwrap(), vec![1]).unwrap();
        t.backward(&s).unwrap();
        // weights permuted back to x positions
        assert_eq!(x.grad().unwrap().data(), &[3., 4., 1., 2., 7., 8., 5., 6.]);
    }
}
