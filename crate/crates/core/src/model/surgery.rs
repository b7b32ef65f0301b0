//! Checkpoint surgery: structural weight removal that larger-to-smaller
//! compression steps are built from. Every function returns a new, validated
//! checkpoint; surviving weights are copied bitwise.

use super::{init_checkpoint, Checkpoint, HeadKind};
use crate::error::{GcError, Result};
use crate::tensor::Tensor;

fn keep_rows(t: &Tensor, keep: &[usize]) -> Tensor {
    let cols: usize = t.shape()[1..].iter().product();
    let mut data = Vec::with_capacity(keep.len() * cols);
    for &r in keep {
        data.extend_from_slice(&t.data()[r * cols..(r + 1) * cols]);
    }
    let mut shape = t.shape().to_vec();
    shape[0] = keep.len();
    Tensor::new(shape, data).unwrap()
}

fn keep_cols(t: &Tensor, keep: &[usize]) -> Tensor {
    let (rows, cols) = (t.shape()[0], t.shape()[1]);
    let mut data = Vec::with_capacity(rows * keep.len());
    for r in 0..rows {
        for &c in keep {
            data.push(t.data()[r * cols + c]);
        }
    }
    Tensor::new(vec![rows, keep.len()], data).unwrap()
}

fn check_unique_sorted(ids: &[usize], bound: usize, what: &str) -> Result<()> {
    if ids.is_empty() {
        return Err(GcError::InvalidInput(format!("empty {what} selection")));
    }
    if ids.windows(2).any(|w| w[0] >= w[1]) || *ids.last().unwrap() >= bound {
        return Err(GcError::InvalidInput(format!(
            "{what} selection must be strictly ascending and < {bound}"
        )));
    }
    Ok(())
}

/// Restrict the vocabulary to `kept_old_ids` (ascending old token ids, as
/// produced by tokenizer pruning). Rewrites `embed.tok` — and, for a tied
/// MLM head, its output bias — by row selection; everything else is copied.
pub fn reshape_embeddings(ck: &Checkpoint, kept_old_ids: &[usize]) -> Result<Checkpoint> {
    check_unique_sorted(kept_old_ids, ck.config.vocab_size, "vocabulary")?;
    let mut out = ck.clone();
    out.config.vocab_size = kept_old_ids.len();
    out.tensors.insert("embed.tok".into(), keep_rows(ck.tensor("embed.tok")?, kept_old_ids));
    if ck.config.head == HeadKind::MaskedLm {
        let bias = ck.tensor("head.out.b")?;
        let data: Vec<f32> = kept_old_ids.iter().map(|&i| bias.data()[i]).collect();
        out.tensors.insert("head.out.b".into(), Tensor::new(vec![kept_old_ids.len()], data)?);
    }
    out.validate()?;
    Ok(out)
}

/// Swap the task head: the encoder trunk (embeddings and layers) is copied
/// bitwise, the new head's parameters are freshly initialized from `seed`.
/// This is how a pre-trained (masked-LM) checkpoint becomes a task model.
pub fn replace_head(ck: &Checkpoint, head: HeadKind, seed: u64) -> Result<Checkpoint> {
    let mut config = ck.config.clone();
    config.head = head;
    let mut out = init_checkpoint(&config, seed)?;
    for (name, t) in &ck.tensors {
        if !name.starts_with("head.") {
            out.tensors.insert(name.clone(), t.clone());
        }
    }
    out.tokenizer_hash = ck.tokenizer_hash.clone();
    out.validate()?;
    Ok(out)
}

/// Keep the listed layers (ascending), renumbering them densely. All kept
/// tensors are copied bitwise; embeddings and head are untouched.
pub fn extract_layers(ck: &Checkpoint, keep: &[usize]) -> Result<Checkpoint> {
    check_unique_sorted(keep, ck.config.n_layers(), "layer")?;
    let mut out = ck.clone();
    out.config.layers = keep.iter().map(|&i| ck.config.layers[i]).collect();
    out.tensors.retain(|name, _| !name.starts_with("layer."));
    for (new_i, &old_i) in keep.iter().enumerate() {
        let prefix = format!("layer.{old_i}.");
        for (name, t) in &ck.tensors {
            if let Some(suffix) = name.strip_prefix(&prefix) {
                out.tensors.insert(format!("layer.{new_i}.{suffix}"), t.clone());
            }
        }
    }
    out.validate()?;
    Ok(out)
}

/// Remove the listed attention heads (ascending indices) from one layer:
/// Q/K/V lose the heads' rows, the output projection loses the matching
/// columns. At least one head must survive.
pub fn remove_heads(ck: &Checkpoint, layer: usize, drop: &[usize]) -> Result<Checkpoint> {
    let shape = *ck
        .config
        .layers
        .get(layer)
        .ok_or_else(|| GcError::InvalidInput(format!("layer {layer} out of range")))?;
    check_unique_sorted(drop, shape.heads, "head")?;
    if drop.len() >= shape.heads {
        return Err(GcError::InvalidInput(format!(
            "cannot remove all {} heads of layer {layer}",
            shape.heads
        )));
    }
    let kept_heads: Vec<usize> = (0..shape.heads).filter(|h| !drop.contains(h)).collect();
    let kept_units: Vec<usize> = kept_heads
        .iter()
        .flat_map(|&h| h * shape.head_dim..(h + 1) * shape.head_dim)
        .collect();
    let mut out = ck.clone();
    out.config.layers[layer].heads = kept_heads.len();
    for p in ["q", "k", "v"] {
        let w = format!("layer.{layer}.attn.{p}.w");
        let b = format!("layer.{layer}.attn.{p}.b");
        out.tensors.insert(w.clone(), keep_rows(ck.tensor(&w)?, &kept_units));
        out.tensors.insert(b.clone(), keep_rows(ck.tensor(&b)?, &kept_units));
    }
    let ow = format!("layer.{layer}.attn.o.w");
    out.tensors.insert(ow.clone(), keep_cols(ck.tensor(&ow)?, &kept_units));
    out.validate()?;
    Ok(out)
}

/// Remove the listed FFN neurons (ascending indices) from one layer: rows of
/// the first projection and columns of the second. At least one survives.
pub fn remove_ffn_neurons(ck: &Checkpoint, layer: usize, drop: &[usize]) -> Result<Checkpoint> {
    let shape = *ck
        .config
        .layers
        .get(layer)
        .ok_or_else(|| GcError::InvalidInput(format!("layer {layer} out of range")))?;
    check_unique_sorted(drop, shape.ffn, "ffn neuron")?;
    if drop.len() >= shape.ffn {
        return Err(GcError::InvalidInput(format!(
            "cannot remove all {} ffn neurons of layer {layer}",
            shape.ffn
        )));
    }
    let kept: Vec<usize> = (0..shape.ffn).filter(|n| !drop.contains(n)).collect();
    let mut out = ck.clone();
    out.config.layers[layer].ffn = kept.len();
    let w1 = format!("layer.{layer}.ffn.w1");
    let b1 = format!("layer.{layer}.ffn.b1");
    let w2 = format!("layer.{layer}.ffn.w2");
    out.tensors.insert(w1.clone(), keep_rows(ck.tensor(&w1)?, &kept));
    out.tensors.insert(b1.clone(), keep_rows(ck.tensor(&b1)?, &kept));
    out.tensors.insert(w2.clone(), keep_cols(ck.tensor(&w2)?, &kept));
    out.validate()?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_checkpoint, Batch, HeadKind, ModelConfig, ModelVars};
    use crate::tensor::Tape;

    fn model(head: HeadKind) -> Checkpoint {
        let cfg = ModelConfig::uniform(13, 6, 8, 3, 2, 8, head).unwrap();
        init_checkpoint(&cfg, 5).unwrap()
    }

    fn logits(ck: &Checkpoint, rows: &[Vec<usize>]) -> Vec<f32> {
        let m = ModelVars::from_checkpoint(ck, false).unwrap();
        let batch = Batch::new(rows, 6).unwrap();
        let tape = Tape::inference();
        m.forward(&tape, &batch, None).unwrap().value().into_data()
    }

    #[test]
    fn reshape_embeddings_selects_rows_bitwise() {
        let ck = model(HeadKind::SingleLabel { classes: 3 });
        let kept = vec![0, 1, 2, 3, 4, 7, 9];
        let out = reshape_embeddings(&ck, &kept).unwrap();
        assert_eq!(out.config.vocab_size, 7);
        let old = ck.tensor("embed.tok").unwrap();
        let new = out.tensor("embed.tok").unwrap();
        for (ni, &oi) in kept.iter().enumerate() {
            assert_eq!(&new.data()[ni * 8..(ni + 1) * 8], &old.data()[oi * 8..(oi + 1) * 8]);
        }
        // removed parameter count: removed_tokens x hidden
        assert_eq!(ck.num_params() - out.num_params(), (13 - 7) * 8);
    }

    #[test]
    fn reshape_embeddings_shrinks_tied_mlm_bias() {
        let ck = model(HeadKind::MaskedLm);
        let out = reshape_embeddings(&ck, &[0, 1, 2, 3, 4, 5]).unwrap();
        assert_eq!(out.tensor("head.out.b").unwrap().shape(), &[6]);
        // embedding rows + bias entries
        assert_eq!(ck.num_params() - out.num_params(), 7 * 8 + 7);
    }

    #[test]
    fn replace_head_keeps_trunk_and_reinitializes_head() {
        let ck = model(HeadKind::MaskedLm);
        let out = replace_head(&ck, HeadKind::SingleLabel { classes: 3 }, 7).unwrap();
        assert_eq!(out.config.head, HeadKind::SingleLabel { classes: 3 });
        for name in ["embed.tok", "embed.pos", "layer.0.attn.q.w", "layer.2.ffn.w2", "layer.1.ln2.g"] {
            assert_eq!(out.tensor(name).unwrap(), ck.tensor(name).unwrap(), "{name}");
        }
        assert_eq!(out.tensor("head.out.w").unwrap().shape(), &[3, 8]);
        assert!(out.tensors.get("head.transform.w").is_none(), "old MLM head dropped");
        // same seed, same fresh head; different seed, different head
        let again = replace_head(&ck, HeadKind::SingleLabel { classes: 3 }, 7).unwrap();
        assert_eq!(again.tensor("head.out.w").unwrap(), out.tensor("head.out.w").unwrap());
        let other = replace_head(&ck, HeadKind::SingleLabel { classes: 3 }, 8).unwrap();
        assert_ne!(other.tensor("head.out.w").unwrap(), out.tensor("head.out.w").unwrap());
    }

    #[test]
    fn extract_layers_is_bitwise() {
        let ck = model(HeadKind::SingleLabel { classes: 3 });
        let out = extract_layers(&ck, &[0, 2]).unwrap();
        assert_eq!(out.config.n_layers(), 2);
        for suffix in ["attn.q.w", "attn.o.b", "ln1.g", "ffn.w1", "ln2.b"] {
            assert_eq!(
                out.tensor(&format!("layer.0.{suffix}")).unwrap(),
                ck.tensor(&format!("layer.0.{suffix}")).unwrap()
            );
            assert_eq!(
                out.tensor(&format!("layer.1.{suffix}")).unwrap(),
                ck.tensor(&format!("layer.2.{suffix}")).unwrap()
            );
        }
        assert_eq!(out.tensor("embed.tok").unwrap(), ck.tensor("embed.tok").unwrap());
    }

    #[test]
    fn removing_a_zeroed_head_preserves_outputs() {
        let mut ck = model(HeadKind::SingleLabel { classes: 3 });
        // silence head 1 of layer 1 by zeroing its value projection
        let hd = 4; // head_dim = hidden 8 / 2 heads
        let vw = ck.tensors.get_mut("layer.1.attn.v.w").unwrap();
        for r in hd..2 * hd {
            for c in 0..8 {
                vw.data_mut()[r * 8 + c] = 0.0;
            }
        }
        let rows = vec![vec![2, 6, 7, 3], vec![2, 8, 3]];
        let before = logits(&ck, &rows);
        let pruned = remove_heads(&ck, 1, &[1]).unwrap();
        assert_eq!(pruned.config.layers[1].heads, 1);
        assert_eq!(pruned.config.layers[0].heads, 2, "other layers untouched");
        let after = logits(&pruned, &rows);
        for (a, b) in before.iter().zip(&after) {
            assert!((a - b).abs() < 1e-5, "{a} vs {b}");
        }
    }

    #[test]
    fn removing_zeroed_ffn_neurons_preserves_outputs() {
        let mut ck = model(HeadKind::SingleLabel { classes: 3 });
        // silence neurons 2 and 5 of layer 0 (rows of w1 + bias)
        let w1 = ck.tensors.get_mut("layer.0.ffn.w1").unwrap();
        for &n in &[2usize, 5] {
            for c in 0..8 {
                w1.data_mut()[n * 8 + c] = 0.0;
            }
        }
        let rows = vec![vec![2, 6, 7, 3]];
        let before = logits(&ck, &rows);
        let pruned = remove_ffn_neurons(&ck, 0, &[2, 5]).unwrap();
        assert_eq!(pruned.config.layers[0].ffn, 6);
        let after = logits(&pruned, &rows);
        for (a, b) in before.iter().zip(&after) {
            assert!((a - b).abs() < 1e-5, "{a} vs {b}");
        }
    }

    #[test]
    fn selections_are_validated() {
        let ck = model(HeadKind::SingleLabel { classes: 3 });
        assert!(extract_layers(&ck, &[2, 0]).is_err(), "must be ascending");
        assert!(extract_layers(&ck, &[0, 3]).is_err(), "out of range");
        assert!(remove_heads(&ck, 0, &[0, 1]).is_err(), "cannot drop every head");
        assert!(remove_ffn_neurons(&ck, 5, &[0]).is_err(), "layer out of range");
        assert!(reshape_embeddings(&ck, &[]).is_err(), "empty keep set");
    }
}
