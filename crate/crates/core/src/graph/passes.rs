//! Graph rewrites: constant folding, redundant-node elimination, operator
//! fusion, and the round-based pipeline combining them.
//!
//! Every pass returns a new graph, never increases the node count, and
//! preserves outputs — folding and fusion use the executor's own kernels,
//! elimination only rewires, so elimination is bit-exact by construction.

use std::collections::{HashMap, HashSet};

use crate::error::Result;

use super::exec::{eval_node, needs_runtime_dims, Operand, Value};
use super::{Constant, GraphProgram, Node, OpKind};

/// Precompute every node whose transitive inputs are all initializers.
/// Nodes needing runtime shape context (symbolic reshapes, position id
/// generation) are left alone even when their data inputs are constant.
pub fn constant_fold(g: &GraphProgram) -> Result<GraphProgram> {
    let mut out = g.clone();
    let mut const_ids: HashSet<String> = out.initializers.keys().cloned().collect();
    let mut kept = Vec::with_capacity(out.nodes.len());
    for node in std::mem::take(&mut out.nodes) {
        let foldable =
            !needs_runtime_dims(&node) && node.inputs.iter().all(|i| const_ids.contains(i));
        if foldable {
            let value = {
                let ins: Vec<Operand> = node
                    .inputs
                    .iter()
                    .map(|id| match &out.initializers[id] {
                        Constant::F32(t) => Operand::F(t),
                        Constant::I8(q) => Operand::Q(q),
                    })
                    .collect();
                eval_node(&node.op, &ins, None)
            };
            // Only f32 results have an initializer representation; anything
            // else (or an evaluation error) keeps the node for runtime.
            if let Ok(Value::F32(t)) = value {
                if t.ensure_finite(node.op.name()).is_ok() {
                    out.initializers.insert(node.id.clone(), Constant::F32(t));
                    const_ids.insert(node.id);
                    continue;
                }
            }
        }
        kept.push(node);
    }
    out.nodes = kept;
    prune_dead(&mut out);
    out.validate()?;
    Ok(out)
}

/// Drop identity nodes (exported dropout sites) and mutually cancelling
/// transpose pairs, rewiring consumers; then sweep unreachable nodes and
/// initializers. Outputs are bit-identical: nothing is recomputed.
pub fn eliminate_redundant(g: &GraphProgram) -> Result<GraphProgram> {
    let mut out = g.clone();
    loop {
        let mut rewire: HashMap<String, String> = HashMap::new();
        for node in &out.nodes {
            let Some(src) = one(node) else { continue };
            match node.op {
                OpKind::Identity => {
                    rewire.insert(node.id.clone(), src);
                }
                OpKind::Transpose { a, b } => {
                    let prev = out.nodes.iter().find(|n| n.id == src);
                    if let Some(prev) = prev {
                        if let (OpKind::Transpose { a: pa, b: pb }, Some(prev_src)) =
                            (&prev.op, one(prev))
                        {
                            if (*pa, *pb) == (a, b) || (*pa, *pb) == (b, a) {
                                rewire.insert(node.id.clone(), prev_src);
                            }
                        }
                    }
                }
                _ => {}
            }
        }
        if rewire.is_empty() {
            break;
        }
        let resolve = |id: &String| {
            let mut cur = id;
            for _ in 0..=rewire.len() {
                match rewire.get(cur) {
                    Some(next) => cur = next,
                    None => break,
                }
            }
            cur.clone()
        };
        for node in &mut out.nodes {
            for input in &mut node.inputs {
                *input = resolve(input);
            }
        }
        for o in &mut out.outputs {
            *o = resolve(o);
        }
        out.nodes.retain(|n| !rewire.contains_key(&n.id));
    }
    prune_dead(&mut out);
    out.validate()?;
    Ok(out)
}

/// Pattern rewrites, applied until none fires:
/// matmul-transposed + bias add → `linear`; `linear` + gelu →
/// `linear_gelu`; the exported nine-node layer-norm subgraph →
/// `layer_norm`; residual add + `layer_norm` → `add_layer_norm`.
pub fn fuse_ops(g: &GraphProgram) -> Result<GraphProgram> {
    let mut out = g.clone();
    while fuse_linear(&mut out)
        || fuse_linear_gelu(&mut out)
        || fuse_layer_norm(&mut out)
        || fuse_add_layer_norm(&mut out)
    {}
    prune_dead(&mut out);
    out.validate()?;
    Ok(out)
}

/// Fold, eliminate, and fuse in rounds until the node count stops moving.
/// Encoder graphs settle in two rounds; five is a hard cap.
pub fn optimize(g: &GraphProgram) -> Result<GraphProgram> {
    let mut cur = g.clone();
    for _ in 0..5 {
        let before = cur.node_count();
        cur = fuse_ops(&eliminate_redundant(&constant_fold(&cur)?)?)?;
        if cur.node_count() == before {
            break;
        }
    }
    Ok(cur)
}

/// Remove nodes and initializers that no output depends on.
fn prune_dead(g: &mut GraphProgram) {
    let mut live: HashSet<String> = g.outputs.iter().cloned().collect();
    for node in g.nodes.iter().rev() {
        if live.contains(&node.id) {
            live.extend(node.inputs.iter().cloned());
        }
    }
    g.nodes.retain(|n| live.contains(&n.id));
    g.initializers.retain(|k, _| live.contains(k));
}

fn one(n: &Node) -> Option<String> {
    match n.inputs.as_slice() {
        [a] => Some(a.clone()),
        _ => None,
    }
}

fn two(n: &Node) -> Option<(String, String)> {
    match n.inputs.as_slice() {
        [a, b] => Some((a.clone(), b.clone())),
        _ => None,
    }
}

/// Total references to `id` across node inputs and graph outputs.
fn ref_count(g: &GraphProgram, id: &str) -> usize {
    let in_nodes: usize =
        g.nodes.iter().map(|n| n.inputs.iter().filter(|i| *i == id).count()).sum();
    in_nodes + g.outputs.iter().filter(|o| *o == id).count()
}

fn f32_init_rank(g: &GraphProgram, id: &str, rank: usize) -> bool {
    matches!(g.initializers.get(id), Some(Constant::F32(t)) if t.rank() == rank)
}

fn node_index(g: &GraphProgram, id: &str) -> Option<usize> {
    g.nodes.iter().position(|n| n.id == id)
}

/// `add(matmul_transb(x, W), B)` with constant `W` (2-D) and `B` (1-D) and
/// a private matmul → `linear(x, W, B)`.
fn fuse_linear(g: &mut GraphProgram) -> bool {
    for yi in 0..g.nodes.len() {
        if !matches!(g.nodes[yi].op, OpKind::Add) {
            continue;
        }
        let Some((mm_id, b_id)) = two(&g.nodes[yi]) else { continue };
        let Some(xi) = node_index(g, &mm_id) else { continue };
        if !matches!(g.nodes[xi].op, OpKind::MatMulTransB) {
            continue;
        }
        let Some((x_id, w_id)) = two(&g.nodes[xi]) else { continue };
        if !f32_init_rank(g, &w_id, 2) || !f32_init_rank(g, &b_id, 1) || ref_count(g, &mm_id) != 1
        {
            continue;
        }
        g.nodes[yi].op = OpKind::Linear;
        g.nodes[yi].inputs = vec![x_id, w_id, b_id];
        g.nodes.remove(xi);
        return true;
    }
    false
}

/// `gelu(linear(..))` with a private linear → `linear_gelu(..)`.
fn fuse_linear_gelu(g: &mut GraphProgram) -> bool {
    for gi in 0..g.nodes.len() {
        if !matches!(g.nodes[gi].op, OpKind::Gelu) {
            continue;
        }
        let Some(lin_id) = one(&g.nodes[gi]) else { continue };
        let Some(li) = node_index(g, &lin_id) else { continue };
        if !matches!(g.nodes[li].op, OpKind::Linear) || ref_count(g, &lin_id) != 1 {
            continue;
        }
        g.nodes[gi].op = OpKind::LinearGelu;
        g.nodes[gi].inputs = g.nodes[li].inputs.clone();
        g.nodes.remove(li);
        return true;
    }
    false
}

/// Match the exported layer-norm decomposition rooted at its final add and
/// collapse all nine nodes into one `layer_norm`. Every interior value must
/// be private to the pattern.
fn fuse_layer_norm(g: &mut GraphProgram) -> bool {
    'outer: for oi in 0..g.nodes.len() {
        if !matches!(g.nodes[oi].op, OpKind::Add) {
            continue;
        }
        let Some((sc_id, bias_id)) = two(&g.nodes[oi]) else { continue };
        if !f32_init_rank(g, &bias_id, 1) {
            continue;
        }
        // walk up: add <- mul(scale) <- mul(normalize) <- rsqrt <- add-eps
        //          <- mean(sq) <- mul(d,d) <- sub <- mean(x)
        let Some(sc) = node_index(g, &sc_id) else { continue };
        if !matches!(g.nodes[sc].op, OpKind::Mul) {
            continue;
        }
        let Some((n_id, gain_id)) = two(&g.nodes[sc]) else { continue };
        if !f32_init_rank(g, &gain_id, 1) {
            continue;
        }
        let Some(n) = node_index(g, &n_id) else { continue };
        if !matches!(g.nodes[n].op, OpKind::Mul) {
            continue;
        }
        let Some((d_id, r_id)) = two(&g.nodes[n]) else { continue };
        let (Some(d), Some(r)) = (node_index(g, &d_id), node_index(g, &r_id)) else { continue };
        if !matches!(g.nodes[r].op, OpKind::Rsqrt) || !matches!(g.nodes[d].op, OpKind::Sub) {
            continue;
        }
        let Some(ve_id) = one(&g.nodes[r]) else { continue };
        let Some(ve) = node_index(g, &ve_id) else { continue };
        let OpKind::AddConst { c: eps } = g.nodes[ve].op else { continue };
        let Some(v_id) = one(&g.nodes[ve]) else { continue };
        let Some(v) = node_index(g, &v_id) else { continue };
        if !matches!(g.nodes[v].op, OpKind::ReduceMeanLast) {
            continue;
        }
        let Some(sq_id) = one(&g.nodes[v]) else { continue };
        let Some(sq) = node_index(g, &sq_id) else { continue };
        if !matches!(g.nodes[sq].op, OpKind::Mul)
            || g.nodes[sq].inputs != vec![d_id.clone(), d_id.clone()]
        {
            continue;
        }
        let Some((x_id, mu_id)) = two(&g.nodes[d]) else { continue };
        let Some(mu) = node_index(g, &mu_id) else { continue };
        if !matches!(g.nodes[mu].op, OpKind::ReduceMeanLast)
            || g.nodes[mu].inputs != vec![x_id.clone()]
        {
            continue;
        }
        // interior values referenced only inside the pattern
        let interior = [
            (mu, 1usize),
            (d, 3),
            (sq, 1),
            (v, 1),
            (ve, 1),
            (r, 1),
            (n, 1),
            (sc, 1),
        ];
        for (idx, want) in interior {
            let id = g.nodes[idx].id.clone();
            if ref_count(g, &id) != want {
                continue 'outer;
            }
        }
        g.nodes[oi].op = OpKind::LayerNorm { eps };
        g.nodes[oi].inputs = vec![x_id, gain_id, bias_id];
        let mut drop: Vec<usize> = interior.iter().map(|&(i, _)| i).collect();
        drop.sort_unstable_by(|a, b| b.cmp(a));
        for i in drop {
            g.nodes.remove(i);
        }
        return true;
    }
    false
}

/// `layer_norm(add(x, y), g, b)` with a private add → residual-fused norm.
fn fuse_add_layer_norm(g: &mut GraphProgram) -> bool {
    for li in 0..g.nodes.len() {
        let OpKind::LayerNorm { eps } = g.nodes[li].op else { continue };
        let Ok([a_id, gain, bias]) = <[String; 3]>::try_from(g.nodes[li].inputs.clone()) else {
            continue;
        };
        let Some(ai) = node_index(g, &a_id) else { continue };
        if !matches!(g.nodes[ai].op, OpKind::Add) || ref_count(g, &a_id) != 1 {
            continue;
        }
        let Some((x_id, y_id)) = two(&g.nodes[ai]) else { continue };
        g.nodes[li].op = OpKind::AddLayerNorm { eps };
        g.nodes[li].inputs = vec![x_id, y_id, gain, bias];
        g.nodes.remove(ai);
        return true;
    }
    false
}
