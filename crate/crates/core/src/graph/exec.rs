//! Graph executor: topological, deterministic, allocation-frugal.
//!
//! Float kernels are the same routines the training forward pass uses
//! (`gemm`, broadcast arithmetic, fused row kernels), so an exported graph
//! reproduces `forward` bit-for-bit, not just approximately. Quantized
//! linears quantize their activations per tensor at call time and
//! accumulate in 32-bit integers.

use std::collections::{BTreeMap, HashMap};

use crate::error::{GcError, Result};
use crate::model::Batch;
use crate::tensor::{
    Tensor, binary_broadcast, gelu_scalar, gemm, layer_norm_rows, matmul_dims, softmax_rows,
    transpose_copy,
};

use super::quant::QuantizedTensor;
use super::{Constant, Dim, GraphProgram, Node, OpKind};

/// Integer tensor (token ids, positions). Row-major, like `Tensor`.
#[derive(Debug, Clone, PartialEq)]
pub struct IntTensor {
    pub shape: Vec<usize>,
    pub data: Vec<i32>,
}

impl IntTensor {
    pub fn new(shape: Vec<usize>, data: Vec<i32>) -> Result<IntTensor> {
        if shape.iter().product::<usize>() != data.len() {
            return Err(GcError::InvalidInput(format!(
                "int tensor shape {:?} does not match {} values",
                shape,
                data.len()
            )));
        }
        Ok(IntTensor { shape, data })
    }
}

/// A runtime value flowing along graph edges.
#[derive(Debug, Clone)]
pub enum Value {
    F32(Tensor),
    I32(IntTensor),
}

impl Value {
    pub fn shape(&self) -> &[usize] {
        match self {
            Value::F32(t) => t.shape(),
            Value::I32(t) => &t.shape,
        }
    }

    pub fn into_f32(self) -> Result<Tensor> {
        match self {
            Value::F32(t) => Ok(t),
            Value::I32(_) => Err(GcError::Graph("expected a float value".into())),
        }
    }
}

/// Borrowed view of a node input, whatever storage it lives in.
pub(super) enum Operand<'a> {
    F(&'a Tensor),
    I(&'a IntTensor),
    Q(&'a QuantizedTensor),
}

impl<'a> Operand<'a> {
    fn f32(&self, op: &'static str) -> Result<&'a Tensor> {
        match self {
            Operand::F(t) => Ok(t),
            _ => Err(GcError::ShapeMismatch { op, detail: "expected f32 operand".into() }),
        }
    }

    fn i32(&self, op: &'static str) -> Result<&'a IntTensor> {
        match self {
            Operand::I(t) => Ok(t),
            _ => Err(GcError::ShapeMismatch { op, detail: "expected integer operand".into() }),
        }
    }

    fn quantized(&self, op: &'static str) -> Result<&'a QuantizedTensor> {
        match self {
            Operand::Q(q) => Ok(q),
            _ => Err(GcError::ShapeMismatch { op, detail: "expected quantized operand".into() }),
        }
    }
}

fn arity(op: &'static str, ins: &[Operand], want: usize) -> Result<()> {
    if ins.len() != want {
        return Err(GcError::ShapeMismatch {
            op,
            detail: format!("expected {want} inputs, got {}", ins.len()),
        });
    }
    Ok(())
}

/// Inputs for a graph exported from an encoder checkpoint: integer token
/// ids `[batch, seq]` plus the additive attention bias.
pub fn batch_inputs(batch: &Batch) -> Vec<(String, Value)> {
    let ids: Vec<i32> = batch.token_ids.iter().map(|&t| t as i32).collect();
    vec![
        (
            "token_ids".to_string(),
            Value::I32(IntTensor { shape: vec![batch.batch, batch.seq], data: ids }),
        ),
        ("attn_bias".to_string(), Value::F32(batch.attn_bias())),
    ]
}

/// Run `g` on a batch and return the first output as logits.
pub fn run_logits(g: &GraphProgram, batch: &Batch) -> Result<Tensor> {
    let outputs = execute(g, &batch_inputs(batch))?;
    outputs
        .into_iter()
        .next()
        .ok_or_else(|| GcError::Graph("graph has no outputs".into()))?
        .into_f32()
}

/// Evaluate every node in order and return the graph outputs. The graph is
/// not mutated; concurrent callers each own their activation map.
pub fn execute(g: &GraphProgram, inputs: &[(String, Value)]) -> Result<Vec<Value>> {
    let mut env: HashMap<&str, Value> = HashMap::new();
    for name in &g.inputs {
        let (_, v) = inputs
            .iter()
            .find(|(n, _)| n == name)
            .ok_or_else(|| GcError::Graph(format!("missing graph input '{name}'")))?;
        env.insert(name, v.clone());
    }
    // Symbolic dims resolve from the first graph input ([batch, seq] ids).
    let dims = g.inputs.first().and_then(|n| env.get(n.as_str())).and_then(|v| match v {
        Value::I32(t) if t.shape.len() == 2 => Some((t.shape[0], t.shape[1])),
        _ => None,
    });

    // How many consumers each id still has; outputs stay live to the end.
    let mut refs: HashMap<&str, usize> = HashMap::new();
    for node in &g.nodes {
        for input in &node.inputs {
            *refs.entry(input).or_insert(0) += 1;
        }
    }
    for out in &g.outputs {
        *refs.entry(out).or_insert(0) += 1;
    }

    for node in &g.nodes {
        let ins = node
            .inputs
            .iter()
            .map(|id| operand(id, &env, &g.initializers))
            .collect::<Result<Vec<_>>>()?;
        let value = eval_node(&node.op, &ins, dims)
            .map_err(|e| GcError::Graph(format!("node '{}': {e}", node.id)))?;
        drop(ins);
        if let Value::F32(t) = &value {
            t.ensure_finite(node.op.name())?;
        }
        env.insert(&node.id, value);
        for input in &node.inputs {
            if let Some(r) = refs.get_mut(input.as_str()) {
                *r -= 1;
                if *r == 0 && !g.inputs.iter().any(|n| n == input) {
                    env.remove(input.as_str());
                }
            }
        }
    }

    g.outputs
        .iter()
        .map(|id| match env.get(id.as_str()) {
            Some(v) => Ok(v.clone()),
            None => match g.initializers.get(id) {
                Some(Constant::F32(t)) => Ok(Value::F32(t.clone())),
                Some(Constant::I8(q)) => Ok(Value::F32(q.dequantize())),
                None => Err(GcError::Graph(format!("output '{id}' was never produced"))),
            },
        })
        .collect()
}

fn operand<'a>(
    id: &str,
    env: &'a HashMap<&str, Value>,
    inits: &'a BTreeMap<String, Constant>,
) -> Result<Operand<'a>> {
    if let Some(v) = env.get(id) {
        return Ok(match v {
            Value::F32(t) => Operand::F(t),
            Value::I32(t) => Operand::I(t),
        });
    }
    match inits.get(id) {
        Some(Constant::F32(t)) => Ok(Operand::F(t)),
        Some(Constant::I8(q)) => Ok(Operand::Q(q)),
        None => Err(GcError::Graph(format!("operand '{id}' is not available"))),
    }
}

/// True when `node` can run without runtime shape context (used by the
/// constant folder: symbolic reshapes and position generation need a live
/// batch even if their data inputs are constant).
pub(super) fn needs_runtime_dims(node: &Node) -> bool {
    match &node.op {
        OpKind::Reshape { dims } => dims.iter().any(|d| !matches!(d, Dim::C(_))),
        OpKind::Positions => true,
        _ => false,
    }
}

pub(super) fn eval_node(
    op: &OpKind,
    ins: &[Operand],
    dims: Option<(usize, usize)>,
) -> Result<Value> {
    let name = op.name();
    match op {
        OpKind::Gather => {
            arity(name, ins, 2)?;
            let table = ins[0].f32(name)?;
            let idx = ins[1].i32(name)?;
            if table.rank() != 2 {
                return Err(GcError::ShapeMismatch {
                    op: name,
                    detail: format!("table must be 2-D, got {:?}", table.shape()),
                });
            }
            let (rows, width) = (table.shape()[0], table.shape()[1]);
            let mut shape = idx.shape.clone();
            shape.push(width);
            let mut data = Vec::with_capacity(idx.data.len() * width);
            for &i in &idx.data {
                let i = usize::try_from(i).map_err(|_| {
                    GcError::InvalidInput(format!("negative gather index {i}"))
                })?;
                if i >= rows {
                    return Err(GcError::InvalidInput(format!(
                        "gather index {i} out of range for {rows} rows"
                    )));
                }
                data.extend_from_slice(&table.data()[i * width..(i + 1) * width]);
            }
            Ok(Value::F32(Tensor::new(shape, data)?))
        }
        OpKind::Positions => {
            arity(name, ins, 1)?;
            let ids = ins[0].i32(name)?;
            if ids.shape.len() != 2 {
                return Err(GcError::ShapeMismatch {
                    op: name,
                    detail: format!("expected [batch, seq] ids, got {:?}", ids.shape),
                });
            }
            let (b, s) = (ids.shape[0], ids.shape[1]);
            let data = (0..b).flat_map(|_| 0..s as i32).collect();
            Ok(Value::I32(IntTensor { shape: vec![b, s], data }))
        }
        OpKind::Add => binary(name, ins, |x, y| x + y),
        OpKind::Sub => binary(name, ins, |x, y| x - y),
        OpKind::Mul => binary(name, ins, |x, y| x * y),
        OpKind::AddConst { c } => unary(name, ins, |v| v + c),
        OpKind::MulConst { c } => unary(name, ins, |v| v * c),
        OpKind::Rsqrt => unary(name, ins, |v| 1.0 / v.sqrt()),
        OpKind::Gelu => unary(name, ins, gelu_scalar),
        OpKind::Tanh => unary(name, ins, f32::tanh),
        OpKind::ReduceMeanLast => {
            arity(name, ins, 1)?;
            let x = ins[0].f32(name)?;
            let cols = *x.shape().last().ok_or(GcError::ShapeMismatch {
                op: name,
                detail: "rank-0 input".into(),
            })?;
            let mut shape = x.shape().to_vec();
            *shape.last_mut().unwrap() = 1;
            let data = x.data().chunks(cols).map(|row| row.iter().sum::<f32>() / cols as f32).collect();
            Ok(Value::F32(Tensor::new(shape, data)?))
        }
        OpKind::MatMul => matmul(name, ins, false),
        OpKind::MatMulTransB => matmul(name, ins, true),
        OpKind::Transpose { a, b } => {
            arity(name, ins, 1)?;
            let x = ins[0].f32(name)?;
            if *a >= x.rank() || *b >= x.rank() {
                return Err(GcError::ShapeMismatch {
                    op: name,
                    detail: format!("axes {a},{b} out of range for {:?}", x.shape()),
                });
            }
            Ok(Value::F32(transpose_copy(x, *a, *b)))
        }
        OpKind::Reshape { dims: target } => {
            arity(name, ins, 1)?;
            let x = ins[0].f32(name)?;
            let shape = resolve_dims(target, dims)?;
            Ok(Value::F32(x.reshaped(shape)?))
        }
        OpKind::Slice { axis, start, len } => {
            arity(name, ins, 1)?;
            let x = ins[0].f32(name)?;
            let shape = x.shape();
            if *axis >= shape.len() || start + len > shape[*axis] {
                return Err(GcError::ShapeMismatch {
                    op: name,
                    detail: format!("range {start}..{} on axis {axis} of {:?}", start + len, shape),
                });
            }
            let outer: usize = shape[..*axis].iter().product();
            let inner: usize = shape[*axis + 1..].iter().product();
            let axis_n = shape[*axis];
            let mut out_shape = shape.to_vec();
            out_shape[*axis] = *len;
            let mut data = Vec::with_capacity(outer * len * inner);
            for o in 0..outer {
                let base = o * axis_n * inner + start * inner;
                data.extend_from_slice(&x.data()[base..base + len * inner]);
            }
            Ok(Value::F32(Tensor::new(out_shape, data)?))
        }
        OpKind::Softmax => {
            arity(name, ins, 1)?;
            let x = ins[0].f32(name)?;
            let cols = *x.shape().last().ok_or(GcError::ShapeMismatch {
                op: name,
                detail: "rank-0 input".into(),
            })?;
            let mut out = x.clone();
            softmax_rows(out.data_mut(), cols);
            Ok(Value::F32(out))
        }
        OpKind::Identity => {
            arity(name, ins, 1)?;
            Ok(match &ins[0] {
                Operand::F(t) => Value::F32((*t).clone()),
                Operand::I(t) => Value::I32((*t).clone()),
                Operand::Q(q) => Value::F32(q.dequantize()),
            })
        }
        OpKind::Linear => Ok(Value::F32(linear(name, ins, false)?)),
        OpKind::LinearGelu => Ok(Value::F32(linear(name, ins, true)?)),
        OpKind::LayerNorm { eps } => {
            arity(name, ins, 3)?;
            let x = ins[0].f32(name)?;
            layer_norm(name, x, &ins[1], &ins[2], *eps)
        }
        OpKind::AddLayerNorm { eps } => {
            arity(name, ins, 4)?;
            let x = binary_broadcast("add", ins[0].f32(name)?, ins[1].f32(name)?, |a, b| a + b)?;
            layer_norm(name, &x, &ins[2], &ins[3], *eps)
        }
        OpKind::QLinear => Ok(Value::F32(qlinear(name, ins, false)?)),
        OpKind::QLinearGelu => Ok(Value::F32(qlinear(name, ins, true)?)),
    }
}

fn unary(name: &'static str, ins: &[Operand], f: impl Fn(f32) -> f32) -> Result<Value> {
    arity(name, ins, 1)?;
    Ok(Value::F32(ins[0].f32(name)?.map(f)))
}

fn binary(name: &'static str, ins: &[Operand], f: impl Fn(f32, f32) -> f32) -> Result<Value> {
    arity(name, ins, 2)?;
    Ok(Value::F32(binary_broadcast(name, ins[0].f32(name)?, ins[1].f32(name)?, f)?))
}

fn resolve_dims(target: &[Dim], dims: Option<(usize, usize)>) -> Result<Vec<usize>> {
    target
        .iter()
        .map(|d| match d {
            Dim::C(n) => Ok(*n),
            Dim::B | Dim::S => {
                let (b, s) = dims.ok_or_else(|| {
                    GcError::Graph("symbolic dims need a [batch, seq] graph input".into())
                })?;
                Ok(if matches!(d, Dim::B) { b } else { s })
            }
        })
        .collect()
}

fn matmul(name: &'static str, ins: &[Operand], trans_b: bool) -> Result<Value> {
    arity(name, ins, 2)?;
    let a = ins[0].f32(name)?;
    let b = ins[1].f32(name)?;
    let (m, k, n, batch, shared_b, out_shape) = matmul_dims(a.shape(), b.shape(), trans_b)?;
    let mut out = Tensor::zeros(&out_shape);
    if m * k * n != 0 {
        for i in 0..batch {
            let asl = &a.data()[i * m * k..(i + 1) * m * k];
            let boff = if shared_b { 0 } else { i * k * n };
            let bsl = &b.data()[boff..boff + k * n];
            let csl = &mut out.data_mut()[i * m * n..(i + 1) * m * n];
            gemm(m, k, n, asl, false, bsl, trans_b, csl, false);
        }
    }
    Ok(Value::F32(out))
}

/// `x @ w^T + b`, optionally fused with GELU. Bit-identical to the separate
/// matmul/add/gelu nodes it replaces: same kernel, same bias addition.
fn linear(name: &'static str, ins: &[Operand], gelu: bool) -> Result<Tensor> {
    arity(name, ins, 3)?;
    let x = ins[0].f32(name)?;
    let w = ins[1].f32(name)?;
    let bias = ins[2].f32(name)?;
    let (m, k, n, batch, shared_b, out_shape) = matmul_dims(x.shape(), w.shape(), true)?;
    if !shared_b || bias.rank() != 1 || bias.numel() != n {
        return Err(GcError::ShapeMismatch {
            op: name,
            detail: format!("want 2-D weight and [{n}] bias, got {:?}/{:?}", w.shape(), bias.shape()),
        });
    }
    let mut out = Tensor::zeros(&out_shape);
    if m * k != 0 {
        for i in 0..batch {
            let asl = &x.data()[i * m * k..(i + 1) * m * k];
            let csl = &mut out.data_mut()[i * m * n..(i + 1) * m * n];
            gemm(m, k, n, asl, false, w.data(), true, csl, false);
        }
    }
    let bd = bias.data();
    for (i, v) in out.data_mut().iter_mut().enumerate() {
        *v += bd[i % n];
        if gelu {
            *v = gelu_scalar(*v);
        }
    }
    Ok(out)
}

fn layer_norm(name: &'static str, x: &Tensor, g: &Operand, b: &Operand, eps: f32) -> Result<Value> {
    let g = g.f32(name)?;
    let b = b.f32(name)?;
    let cols = *x.shape().last().ok_or(GcError::ShapeMismatch {
        op: name,
        detail: "rank-0 input".into(),
    })?;
    if g.numel() != cols || b.numel() != cols {
        return Err(GcError::ShapeMismatch {
            op: name,
            detail: format!("gain/bias must have {cols} entries"),
        });
    }
    let mut out = Tensor::zeros(x.shape());
    layer_norm_rows(x.data(), cols, g.data(), b.data(), eps, out.data_mut());
    Ok(Value::F32(out))
}

// Integer dot product shaped for the auto-vectorizer: sixteen independent
// accumulator lanes over i16 inputs compile to packed multiply-accumulate
// (a pre-widened i16 stream maps straight onto the packed i16→i32 multiply;
// feeding i8 directly, unrolling by hand, or letting this inline into the
// surrounding float code each cost a measured 2-4x). Wrapping arithmetic is
// exact, not a concession: operands are int8 codes, so |product| ≤ 128·127
// and a lane cannot reach i32 range below k ≈ 2e6, far past any model
// width. It matters because checked adds compile to per-element overflow
// branches, which block vectorization.
#[inline(never)]
fn dot_q(a: &[i16], b: &[i16]) -> i32 {
    let mut lanes = [0i32; 16];
    let (ca, ra) = a.split_at(a.len() / 16 * 16);
    let (cb, rb) = b.split_at(ca.len());
    for (pa, pb) in ca.chunks_exact(16).zip(cb.chunks_exact(16)) {
        for j in 0..16 {
            lanes[j] = lanes[j].wrapping_add((pa[j] as i32).wrapping_mul(pb[j] as i32));
        }
    }
    let mut acc = lanes.iter().fold(0i32, |s, &l| s.wrapping_add(l));
    for (&x, &y) in ra.iter().zip(rb) {
        acc = acc.wrapping_add((x as i32).wrapping_mul(y as i32));
    }
    acc
}

/// Asymmetric per-tensor int8 quantization from the data's runtime min/max:
/// returns the codes, the scale, and the zero point.
fn quantize_activations(xd: &[f32]) -> (Vec<i8>, f32, i32) {
    let (mut lo, mut hi) = (f32::INFINITY, f32::NEG_INFINITY);
    for &v in xd {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    let s_x = ((hi - lo) / 255.0).max(1e-6);
    let zp = (-lo / s_x).round() as i32 - 128;
    let qx: Vec<i8> =
        xd.iter().map(|&v| (((v / s_x).round() as i32) + zp).clamp(-128, 127) as i8).collect();
    (qx, s_x, zp)
}

/// Dynamically quantized linear over flat slices. Activations go to
/// asymmetric int8 using their runtime min/max; the product accumulates
/// exactly in i32 and the zero-point correction uses precomputed per-row
/// weight sums: `y = s_x * s_w[r] * (sum(qx * qw_r) - zp * sum(qw_r)) + b[r]`.
fn qlinear_core(
    xd: &[f32],
    w: &QuantizedTensor,
    bd: &[f32],
    rows: usize,
    k: usize,
    n: usize,
    od: &mut [f32],
    gelu: bool,
) {
    let (qx, s_x, zp) = quantize_activations(xd);
    // Both operands widen to i16 once up front (the form dot_q vectorizes),
    // and the per-row constants hoist out of the hot loop: the zero-point
    // correction zp·Σqw_r and the combined scale s_x·s_w[r].
    let qx16: Vec<i16> = qx.iter().map(|&q| q as i16).collect();
    let w16: Vec<i16> = w.values.iter().map(|&q| q as i16).collect();
    let corr: Vec<i64> = (0..n)
        .map(|r| zp as i64 * w.row(r).iter().map(|&q| q as i64).sum::<i64>())
        .collect();
    let coeff: Vec<f32> = w.scales.iter().map(|&s| s_x * s).collect();
    for i in 0..rows {
        let xrow = &qx16[i * k..(i + 1) * k];
        let orow = &mut od[i * n..(i + 1) * n];
        for r in 0..n {
            let acc = dot_q(xrow, &w16[r * k..(r + 1) * k]) as i64 - corr[r];
            let mut y = coeff[r] * acc as f32 + bd[r];
            if gelu {
                y = gelu_scalar(y);
            }
            orow[r] = y;
        }
    }
}

fn qlinear(name: &'static str, ins: &[Operand], gelu: bool) -> Result<Tensor> {
    arity(name, ins, 3)?;
    let x = ins[0].f32(name)?;
    let w = ins[1].quantized(name)?;
    let bias = ins[2].f32(name)?;
    let (m, k, n, batch, _, out_shape) = matmul_dims(x.shape(), &w.shape, true)?;
    if bias.rank() != 1 || bias.numel() != n {
        return Err(GcError::ShapeMismatch {
            op: name,
            detail: format!("want [{n}] bias, got {:?}", bias.shape()),
        });
    }
    let rows = batch * m;
    let mut out = Tensor::zeros(&out_shape);
    if rows == 0 || k == 0 {
        return Ok(out);
    }
    qlinear_core(x.data(), w, bias.data(), rows, k, n, out.data_mut(), gelu);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn f(shape: &[usize], data: &[f32]) -> Value {
        Value::F32(Tensor::new(shape.to_vec(), data.to_vec()).unwrap())
    }

    fn graph_one(op: OpKind, inputs: &[&str]) -> GraphProgram {
        GraphProgram {
            nodes: vec![Node {
                id: "y".into(),
                op,
                inputs: inputs.iter().map(|s| s.to_string()).collect(),
            }],
            initializers: BTreeMap::new(),
            inputs: vec!["ids".into(), "x".into()],
            outputs: vec!["y".into()],
        }
    }

    fn ids(b: usize, s: usize) -> Value {
        Value::I32(IntTensor { shape: vec![b, s], data: vec![0; b * s] })
    }

    #[test]
    fn symbolic_reshape_follows_the_id_input() {
        let g = graph_one(
            OpKind::Reshape { dims: vec![Dim::S, Dim::B, Dim::C(2)] },
            &["x"],
        );
        let out = execute(
            &g,
            &[("ids".into(), ids(1, 3)), ("x".into(), f(&[1, 6], &[0., 1., 2., 3., 4., 5.]))],
        )
        .unwrap();
        assert_eq!(out[0].shape(), &[3, 1, 2]);
    }

    #[test]
    fn dead_intermediates_do_not_break_outputs() {
        // x -> a -> y, with a also requested as an output
        let g = GraphProgram {
            nodes: vec![
                Node { id: "a".into(), op: OpKind::AddConst { c: 1.0 }, inputs: vec!["x".into()] },
                Node { id: "y".into(), op: OpKind::MulConst { c: 2.0 }, inputs: vec!["a".into()] },
            ],
            initializers: BTreeMap::new(),
            inputs: vec!["ids".into(), "x".into()],
            outputs: vec!["y".into(), "a".into()],
        };
        let out =
            execute(&g, &[("ids".into(), ids(1, 2)), ("x".into(), f(&[2], &[1.0, 2.0]))]).unwrap();
        let y = out[0].clone().into_f32().unwrap();
        let a = out[1].clone().into_f32().unwrap();
        assert_eq!(y.data(), &[4.0, 6.0]);
        assert_eq!(a.data(), &[2.0, 3.0]);
    }

    #[test]
    fn missing_input_is_reported_by_name() {
        let g = graph_one(OpKind::Tanh, &["x"]);
        let err = execute(&g, &[("ids".into(), ids(1, 1))]).unwrap_err();
        assert!(err.to_string().contains("'x'"), "{err}");
    }

    #[test]
    fn non_finite_intermediate_is_an_error() {
        let g = graph_one(OpKind::Rsqrt, &["x"]);
        let err = execute(
            &g,
            &[("ids".into(), ids(1, 1)), ("x".into(), f(&[2], &[4.0, -1.0]))],
        )
        .unwrap_err();
        assert!(matches!(err, GcError::NonFinite(_)), "{err}");
    }

    #[test]
    fn qlinear_matches_f32_within_quant_noise() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let (m, k, n) = (7, 24, 9);
        let x = Tensor::new(vec![m, k], (0..m * k).map(|_| rng.gen_range(-2.0..2.0)).collect()).unwrap();
        let w = Tensor::new(vec![n, k], (0..n * k).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let b = Tensor::new(vec![n], (0..n).map(|_| rng.gen_range(-0.5..0.5)).collect()).unwrap();
        let qw = QuantizedTensor::from_rows(&w).unwrap();
        let exact = linear("linear", &[Operand::F(&x), Operand::F(&w), Operand::F(&b)], false).unwrap();
        let quant =
            qlinear("q_linear", &[Operand::F(&x), Operand::Q(&qw), Operand::F(&b)], false).unwrap();
        for (a, q) in exact.data().iter().zip(quant.data()) {
            assert!((a - q).abs() < 0.05, "f32 {a} vs int8 {q}");
        }
    }

    #[test]
    fn qlinear_zero_rows_are_exactly_bias() {
        let x = Tensor::new(vec![2, 3], vec![0.5, -1.0, 2.0, 0.0, 1.0, -0.25]).unwrap();
        let w = Tensor::zeros(&[4, 3]);
        let b = Tensor::new(vec![4], vec![1.0, -2.0, 0.0, 0.5]).unwrap();
        let qw = QuantizedTensor::from_rows(&w).unwrap();
        let y = qlinear("q_linear", &[Operand::F(&x), Operand::Q(&qw), Operand::F(&b)], false).unwrap();
        assert_eq!(&y.data()[..4], b.data());
        assert_eq!(&y.data()[4..], b.data());
    }
}
