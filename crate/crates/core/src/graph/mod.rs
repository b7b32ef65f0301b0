//! Static inference graphs.
//!
//! A checkpoint is exported to a flat, topologically ordered operator list
//! (`export_graph`), rewritten by the optimization passes (`constant_fold`,
//! `eliminate_redundant`, `fuse_ops`, or all three via `optimize`), weight
//! matrices are quantized to int8 (`quantize_dynamic`), and the result runs
//! under a deterministic interpreter (`execute`).
//!
//! On disk a graph reuses the checkpoint container envelope with
//! `kind = "graph"`: the node list and signature travel in the JSON
//! manifest, initializers as tensor payloads (`f32`, or `qi8` = per-row
//! scales followed by the int8 values).

mod exec;
mod export;
mod passes;
mod quant;

use std::collections::HashSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{GcError, Result};
use crate::model::container::{RawTensor, read_container, write_container};
use crate::tensor::Tensor;

pub use exec::{IntTensor, Value, batch_inputs, execute, run_logits};
pub use export::export_graph;
pub use passes::{constant_fold, eliminate_redundant, fuse_ops, optimize};
pub use quant::{QuantizedTensor, quantize_dynamic};

/// A reshape dimension: fixed, or resolved at run time from the id input
/// (`B` = batch rows, `S` = padded sequence length).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Dim {
    B,
    S,
    C(usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OpKind {
    /// `[table f32 [n,h], indices i32] -> f32 [..,h]`
    Gather,
    /// `[ids i32 [b,s]] -> i32 [b,s]` holding each element's column index.
    Positions,
    Add,
    Sub,
    Mul,
    AddConst { c: f32 },
    MulConst { c: f32 },
    Rsqrt,
    /// Mean over the last axis, kept as a trailing dimension of 1.
    ReduceMeanLast,
    MatMul,
    /// `x @ y^T`; `y` is a `[n,k]` matrix or batched like `x`.
    MatMulTransB,
    Transpose { a: usize, b: usize },
    Reshape { dims: Vec<Dim> },
    Slice { axis: usize, start: usize, len: usize },
    Softmax,
    Gelu,
    Tanh,
    /// Dropout in eval mode; exists so the eliminator has work to do.
    Identity,
    /// Fused `[x, w, b] -> x @ w^T + b`.
    Linear,
    LinearGelu,
    LayerNorm { eps: f32 },
    /// Fused residual add + layer norm: `[x, y, g, b] -> ln(x + y)`.
    AddLayerNorm { eps: f32 },
    /// `Linear` with an int8 weight; activations quantized per call.
    QLinear,
    QLinearGelu,
}

impl OpKind {
    pub fn name(&self) -> &'static str {
        match self {
            OpKind::Gather => "gather",
            OpKind::Positions => "positions",
            OpKind::Add => "add",
            OpKind::Sub => "sub",
            OpKind::Mul => "mul",
            OpKind::AddConst { .. } => "add_const",
            OpKind::MulConst { .. } => "mul_const",
            OpKind::Rsqrt => "rsqrt",
            OpKind::ReduceMeanLast => "reduce_mean_last",
            OpKind::MatMul => "matmul",
            OpKind::MatMulTransB => "matmul_transb",
            OpKind::Transpose { .. } => "transpose",
            OpKind::Reshape { .. } => "reshape",
            OpKind::Slice { .. } => "slice",
            OpKind::Softmax => "softmax",
            OpKind::Gelu => "gelu",
            OpKind::Tanh => "tanh",
            OpKind::Identity => "identity",
            OpKind::Linear => "linear",
            OpKind::LinearGelu => "linear_gelu",
            OpKind::LayerNorm { .. } => "layer_norm",
            OpKind::AddLayerNorm { .. } => "add_layer_norm",
            OpKind::QLinear => "qlinear",
            OpKind::QLinearGelu => "qlinear_gelu",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Node {
    pub id: String,
    pub op: OpKind,
    pub inputs: Vec<String>,
}

/// An initializer payload: plain f32, or per-row int8.
#[derive(Debug, Clone, PartialEq)]
pub enum Constant {
    F32(Tensor),
    I8(QuantizedTensor),
}

impl Constant {
    pub fn shape(&self) -> &[usize] {
        match self {
            Constant::F32(t) => t.shape(),
            Constant::I8(q) => &q.shape,
        }
    }

    /// Serialized payload size in bytes (what the container stores).
    pub fn byte_len(&self) -> usize {
        match self {
            Constant::F32(t) => t.numel() * 4,
            Constant::I8(q) => q.scales.len() * 4 + q.values.len(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GraphProgram {
    /// Topologically ordered: a node may only consume earlier ids.
    pub nodes: Vec<Node>,
    pub initializers: std::collections::BTreeMap<String, Constant>,
    pub inputs: Vec<String>,
    pub outputs: Vec<String>,
}

impl GraphProgram {
    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    /// Structural checks: unique single-assignment ids, inputs resolvable
    /// in topological order, outputs resolvable. Acyclicity follows from
    /// the ordering requirement.
    pub fn validate(&self) -> Result<()> {
        let mut known: HashSet<&str> = HashSet::new();
        for id in self.inputs.iter().chain(self.initializers.keys()) {
            if !known.insert(id) {
                return Err(GcError::InvalidConfig(format!("duplicate graph id {id:?}")));
            }
        }
        for node in &self.nodes {
            for input in &node.inputs {
                if !known.contains(input.as_str()) {
                    return Err(GcError::InvalidConfig(format!(
                        "node {:?} consumes {input:?} before it is defined",
                        node.id
                    )));
                }
            }
            if !known.insert(&node.id) {
                return Err(GcError::InvalidConfig(format!("duplicate graph id {:?}", node.id)));
            }
        }
        for out in &self.outputs {
            if !known.contains(out.as_str()) {
                return Err(GcError::InvalidConfig(format!("unknown graph output {out:?}")));
            }
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.validate()?;
        let meta = serde_json::to_value(GraphMeta {
            inputs: self.inputs.clone(),
            outputs: self.outputs.clone(),
            nodes: self.nodes.clone(),
        })?;
        let tensors: Vec<RawTensor> = self
            .initializers
            .iter()
            .map(|(name, c)| match c {
                Constant::F32(t) => RawTensor::from_f32(name, t),
                Constant::I8(q) => {
                    let mut data = Vec::with_capacity(c.byte_len());
                    for s in &q.scales {
                        data.extend_from_slice(&s.to_le_bytes());
                    }
                    data.extend(q.values.iter().map(|&v| v as u8));
                    RawTensor {
                        name: name.clone(),
                        dtype: "qi8".into(),
                        shape: q.shape.clone(),
                        data,
                    }
                }
            })
            .collect();
        write_container(path, "graph", meta, &tensors)
    }

    pub fn load(path: &Path) -> Result<GraphProgram> {
        let (kind, meta, tensors) = read_container(path)?;
        if kind != "graph" {
            return Err(GcError::Container(format!("expected a graph container, found {kind:?}")));
        }
        let meta: GraphMeta = serde_json::from_value(meta)?;
        let mut initializers = std::collections::BTreeMap::new();
        for raw in tensors {
            let c = match raw.dtype.as_str() {
                "f32" => Constant::F32(raw.to_f32()?),
                "qi8" => {
                    let rows = *raw.shape.first().ok_or_else(|| {
                        GcError::Container(format!("qi8 tensor {} is rank-0", raw.name))
                    })?;
                    let numel: usize = raw.shape.iter().product();
                    if raw.data.len() != rows * 4 + numel {
                        return Err(GcError::Container(format!(
                            "qi8 tensor {} payload size mismatch",
                            raw.name
                        )));
                    }
                    let scales: Vec<f32> = raw.data[..rows * 4]
                        .chunks_exact(4)
                        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                        .collect();
                    let values: Vec<i8> = raw.data[rows * 4..].iter().map(|&b| b as i8).collect();
                    Constant::I8(QuantizedTensor { shape: raw.shape, values, scales })
                }
                other => {
                    return Err(GcError::Container(format!(
                        "tensor {} has unsupported dtype {other:?}",
                        raw.name
                    )))
                }
            };
            initializers.insert(raw.name, c);
        }
        let g = GraphProgram {
            nodes: meta.nodes,
            initializers,
            inputs: meta.inputs,
            outputs: meta.outputs,
        };
        g.validate()?;
        Ok(g)
    }
}

#[derive(Serialize, Deserialize)]
struct GraphMeta {
    inputs: Vec<String>,
    outputs: Vec<String>,
    nodes: Vec<Node>,
}
