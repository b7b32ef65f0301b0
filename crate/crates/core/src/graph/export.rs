//! Checkpoint → inference graph export.
//!
//! The emitted graph mirrors the eval-mode forward pass node for node:
//! dropout sites become `identity` (left for the eliminator), every linear
//! is an explicit matmul + bias add (left for the fuser), and layer norm is
//! spelled out as its mean/variance/normalize arithmetic. Because the
//! executor shares the forward pass's kernels, an exported graph reproduces
//! `ModelVars::forward` exactly, not merely within tolerance.

use std::collections::BTreeMap;

use crate::error::{GcError, Result};
use crate::model::{Checkpoint, HeadKind};

use super::{Constant, Dim, GraphProgram, Node, OpKind};

const TOKEN_IDS: &str = "token_ids";
const ATTN_BIAS: &str = "attn_bias";

struct Builder<'a> {
    ck: &'a Checkpoint,
    nodes: Vec<Node>,
    inits: BTreeMap<String, Constant>,
}

impl Builder<'_> {
    fn push(&mut self, id: String, op: OpKind, inputs: Vec<String>) -> String {
        self.nodes.push(Node { id: id.clone(), op, inputs });
        id
    }

    /// Reference a checkpoint tensor, registering it as an initializer.
    fn init(&mut self, name: &str) -> Result<String> {
        if !self.inits.contains_key(name) {
            let t = self.ck.tensors.get(name).ok_or_else(|| {
                GcError::Graph(format!("checkpoint is missing tensor '{name}'"))
            })?;
            self.inits.insert(name.to_string(), Constant::F32(t.clone()));
        }
        Ok(name.to_string())
    }

    /// `x @ w^T + b` as two nodes; returns the bias-add id.
    fn linear(&mut self, prefix: &str, x: String, w: &str, b: &str) -> Result<String> {
        let w = self.init(w)?;
        let b = self.init(b)?;
        let mm = self.push(format!("{prefix}/mm"), OpKind::MatMulTransB, vec![x, w]);
        Ok(self.push(format!("{prefix}/add"), OpKind::Add, vec![mm, b]))
    }

    /// Layer norm spelled out: mean, centered difference, variance, inverse
    /// std, normalize, scale, shift — the same arithmetic order as the
    /// fused row kernel, so folding it back is bit-preserving.
    fn layer_norm(&mut self, p: &str, x: String, g: &str, b: &str, eps: f32) -> Result<String> {
        let g = self.init(g)?;
        let b = self.init(b)?;
        let mu = self.push(format!("{p}/mu"), OpKind::ReduceMeanLast, vec![x.clone()]);
        let d = self.push(format!("{p}/d"), OpKind::Sub, vec![x, mu]);
        let sq = self.push(format!("{p}/sq"), OpKind::Mul, vec![d.clone(), d.clone()]);
        let v = self.push(format!("{p}/var"), OpKind::ReduceMeanLast, vec![sq]);
        let ve = self.push(format!("{p}/veps"), OpKind::AddConst { c: eps }, vec![v]);
        let r = self.push(format!("{p}/rstd"), OpKind::Rsqrt, vec![ve]);
        let n = self.push(format!("{p}/norm"), OpKind::Mul, vec![d, r]);
        let sc = self.push(format!("{p}/scale"), OpKind::Mul, vec![n, g]);
        Ok(self.push(format!("{p}/out"), OpKind::Add, vec![sc, b]))
    }

    fn encoder_layer(&mut self, i: usize, x: String) -> Result<String> {
        let l = self.ck.config.layers[i];
        let eps = self.ck.config.ln_eps;
        let p = format!("l{i}");
        let pn = |suffix: &str| format!("layer.{i}.{suffix}");

        let split = |b: &mut Self, name: &str, lin: String| -> String {
            let r = b.push(
                format!("{p}/{name}/split"),
                OpKind::Reshape {
                    dims: vec![Dim::B, Dim::S, Dim::C(l.heads), Dim::C(l.head_dim)],
                },
                vec![lin],
            );
            b.push(format!("{p}/{name}/t"), OpKind::Transpose { a: 1, b: 2 }, vec![r])
        };
        let q_lin = self.linear(&format!("{p}/q"), x.clone(), &pn("attn.q.w"), &pn("attn.q.b"))?;
        let q = split(self, "q", q_lin);
        let k_lin = self.linear(&format!("{p}/k"), x.clone(), &pn("attn.k.w"), &pn("attn.k.b"))?;
        let k = split(self, "k", k_lin);
        let v_lin = self.linear(&format!("{p}/v"), x.clone(), &pn("attn.v.w"), &pn("attn.v.b"))?;
        let v = split(self, "v", v_lin);

        let scores = self.push(format!("{p}/scores"), OpKind::MatMulTransB, vec![q, k]);
        let scaled = self.push(
            format!("{p}/scaled"),
            OpKind::MulConst { c: 1.0 / (l.head_dim as f32).sqrt() },
            vec![scores],
        );
        let biased =
            self.push(format!("{p}/biased"), OpKind::Add, vec![scaled, ATTN_BIAS.to_string()]);
        let attn = self.push(format!("{p}/attn"), OpKind::Softmax, vec![biased]);
        let attn = self.push(format!("{p}/attn_drop"), OpKind::Identity, vec![attn]);

        let ctx = self.push(format!("{p}/ctx"), OpKind::MatMul, vec![attn, v]);
        let ctx = self.push(format!("{p}/ctx_t"), OpKind::Transpose { a: 1, b: 2 }, vec![ctx]);
        let ctx = self.push(
            format!("{p}/ctx_flat"),
            OpKind::Reshape { dims: vec![Dim::B, Dim::S, Dim::C(l.heads * l.head_dim)] },
            vec![ctx],
        );
        let out = self.linear(&format!("{p}/o"), ctx, &pn("attn.o.w"), &pn("attn.o.b"))?;
        let out = self.push(format!("{p}/o_drop"), OpKind::Identity, vec![out]);
        let res1 = self.push(format!("{p}/res1"), OpKind::Add, vec![x, out]);
        let x = self.layer_norm(&format!("{p}/ln1"), res1, &pn("ln1.g"), &pn("ln1.b"), eps)?;

        let ff = self.linear(&format!("{p}/ffn1"), x.clone(), &pn("ffn.w1"), &pn("ffn.b1"))?;
        let ff = self.push(format!("{p}/gelu"), OpKind::Gelu, vec![ff]);
        let ff = self.linear(&format!("{p}/ffn2"), ff, &pn("ffn.w2"), &pn("ffn.b2"))?;
        let ff = self.push(format!("{p}/ffn_drop"), OpKind::Identity, vec![ff]);
        let res2 = self.push(format!("{p}/res2"), OpKind::Add, vec![x, ff]);
        self.layer_norm(&format!("{p}/ln2"), res2, &pn("ln2.g"), &pn("ln2.b"), eps)
    }
}

/// Export an eval-mode inference graph for a checkpoint. The graph takes
/// `token_ids` (int32 `[batch, seq]`) and `attn_bias` (f32
/// `[batch, 1, 1, seq]`) and produces the head logits.
pub fn export_graph(ck: &Checkpoint) -> Result<GraphProgram> {
    ck.validate()?;
    let cfg = &ck.config;
    let mut b = Builder { ck, nodes: Vec::new(), inits: BTreeMap::new() };

    let tok_table = b.init("embed.tok")?;
    let tok = b.push("emb/tok".into(), OpKind::Gather, vec![tok_table, TOKEN_IDS.to_string()]);
    let pos_ids = b.push("emb/pos_ids".into(), OpKind::Positions, vec![TOKEN_IDS.to_string()]);
    let pos_table = b.init("embed.pos")?;
    let pos = b.push("emb/pos".into(), OpKind::Gather, vec![pos_table, pos_ids]);
    let sum = b.push("emb/sum".into(), OpKind::Add, vec![tok, pos]);
    let mut x = b.push("emb/x".into(), OpKind::Identity, vec![sum]);

    for i in 0..cfg.n_layers() {
        x = b.encoder_layer(i, x)?;
    }

    let logits = match &cfg.head {
        HeadKind::SingleLabel { .. } | HeadKind::MultiLabel { .. } | HeadKind::Regression => {
            let first =
                b.push("head/first".into(), OpKind::Slice { axis: 1, start: 0, len: 1 }, vec![x]);
            let flat = b.push(
                "head/flat".into(),
                OpKind::Reshape { dims: vec![Dim::B, Dim::C(cfg.hidden)] },
                vec![first],
            );
            let pool = b.linear("head/pool", flat, "head.pool.w", "head.pool.b")?;
            let t = b.push("head/tanh".into(), OpKind::Tanh, vec![pool]);
            let t = b.push("head/drop".into(), OpKind::Identity, vec![t]);
            b.linear("head/out", t, "head.out.w", "head.out.b")?
        }
        HeadKind::TokenLabel { .. } => {
            let d = b.push("head/drop".into(), OpKind::Identity, vec![x]);
            b.linear("head/out", d, "head.out.w", "head.out.b")?
        }
        HeadKind::MaskedLm => {
            let t = b.linear("head/transform", x, "head.transform.w", "head.transform.b")?;
            let t = b.push("head/gelu".into(), OpKind::Gelu, vec![t]);
            let t = b.layer_norm("head/ln", t, "head.ln.g", "head.ln.b", cfg.ln_eps)?;
            let tok_table = b.init("embed.tok")?;
            let mm = b.push("head/decode".into(), OpKind::MatMulTransB, vec![t, tok_table]);
            let bias = b.init("head.out.b")?;
            b.push("head/logits".into(), OpKind::Add, vec![mm, bias])
        }
    };

    let g = GraphProgram {
        nodes: b.nodes,
        initializers: b.inits,
        inputs: vec![TOKEN_IDS.to_string(), ATTN_BIAS.to_string()],
        outputs: vec![logits],
    };
    g.validate()?;
    Ok(g)
}
