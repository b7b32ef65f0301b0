//! Runtime model: parameters bound as autodiff `Var`s plus the forward pass.

use std::collections::HashMap;

use rand_chacha::ChaCha8Rng;

use super::{Checkpoint, HeadKind, ModelConfig};
use crate::error::{GcError, Result};
use crate::tensor::{Tape, Tensor, Var};
use crate::tokenizer::PAD_ID;

const MASK_BIAS: f32 = -1e9;

/// A padded batch of token id rows.
#[derive(Debug, Clone)]
pub struct Batch {
    pub batch: usize,
    pub seq: usize,
    /// batch*seq ids, row-major, right-padded with [PAD].
    pub token_ids: Vec<usize>,
    pub lengths: Vec<usize>,
}

impl Batch {
    /// Pad (and truncate) rows to a common length, capped at `max_seq`.
    pub fn new(rows: &[Vec<usize>], max_seq: usize) -> Result<Batch> {
        if rows.is_empty() {
            return Err(GcError::InvalidInput("empty batch".into()));
        }
        if rows.iter().any(|r| r.is_empty()) {
            return Err(GcError::InvalidInput("batch contains an empty row".into()));
        }
        let seq = rows.iter().map(Vec::len).max().unwrap().min(max_seq);
        let mut token_ids = Vec::with_capacity(rows.len() * seq);
        let mut lengths = Vec::with_capacity(rows.len());
        for row in rows {
            let len = row.len().min(seq);
            token_ids.extend_from_slice(&row[..len]);
            token_ids.extend(std::iter::repeat(PAD_ID).take(seq - len));
            lengths.push(len);
        }
        Ok(Batch { batch: rows.len(), seq, token_ids, lengths })
    }

    /// Additive attention bias `[batch, 1, 1, seq]`: 0 at real positions,
    /// a large negative value at padding so those keys get zero weight.
    pub fn attn_bias(&self) -> Tensor {
        let mut data = vec![0.0f32; self.batch * self.seq];
        for (r, &len) in self.lengths.iter().enumerate() {
            for c in len..self.seq {
                data[r * self.seq + c] = MASK_BIAS;
            }
        }
        Tensor::new(vec![self.batch, 1, 1, self.seq], data).unwrap()
    }
}

/// Checkpoint bound to autodiff variables.
pub struct ModelVars {
    pub config: ModelConfig,
    /// Canonical creation order — the order optimizers iterate in.
    pub params: Vec<(String, Var)>,
    map: HashMap<String, Var>,
}

impl ModelVars {
    /// Bind every tensor as a `Var`; `trainable = false` freezes the model
    /// (no gradients, e.g. a distillation teacher).
    pub fn from_checkpoint(ck: &Checkpoint, trainable: bool) -> Result<ModelVars> {
        ck.validate()?;
        let mut params = Vec::new();
        let mut map = HashMap::new();
        for (name, _) in ck.config.param_shapes() {
            let v = Var::new(ck.tensors[&name].clone(), trainable);
            params.push((name.clone(), v.clone()));
            map.insert(name, v);
        }
        Ok(ModelVars { config: ck.config.clone(), params, map })
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let tensors = self.params.iter().map(|(n, v)| (n.clone(), v.value())).collect();
        Checkpoint { config: self.config.clone(), tensors, tokenizer_hash: None }
    }

    pub fn var(&self, name: &str) -> &Var {
        &self.map[name]
    }

    fn maybe_dropout(&self, tape: &Tape, x: &Var, rng: &mut Option<&mut ChaCha8Rng>) -> Result<Var> {
        match rng {
            Some(r) => tape.dropout(x, self.config.dropout, *r),
            None => Ok(x.clone()),
        }
    }

    /// Run the encoder and head. `rng = Some(..)` enables dropout (training
    /// mode); `None` is deterministic evaluation. Returns logits:
    /// `[batch, classes]` for sequence heads, `[batch, seq, classes]` for
    /// token-level heads, `[batch]`-agnostic `[batch, 1]` for regression.
    pub fn forward(&self, tape: &Tape, batch: &Batch, mut rng: Option<&mut ChaCha8Rng>) -> Result<Var> {
        let cfg = &self.config;
        let (b, s, h) = (batch.batch, batch.seq, cfg.hidden);
        if s > cfg.max_seq_len {
            return Err(GcError::InvalidInput(format!(
                "sequence length {s} exceeds model maximum {}",
                cfg.max_seq_len
            )));
        }
        let x_tok = tape.gather(self.var("embed.tok"), &batch.token_ids, &[b, s])?;
        let pos_ids: Vec<usize> = (0..b).flat_map(|_| 0..s).collect();
        let x_pos = tape.gather(self.var("embed.pos"), &pos_ids, &[b, s])?;
        let mut x = tape.add(&x_tok, &x_pos)?;
        x = self.maybe_dropout(tape, &x, &mut rng)?;
        let bias = Var::constant(batch.attn_bias());
        for i in 0..cfg.n_layers() {
            x = self.layer_forward(tape, &x, i, b, s, &bias, &mut rng)?;
        }
        match &cfg.head {
            HeadKind::SingleLabel { .. } | HeadKind::MultiLabel { .. } | HeadKind::Regression => {
                let first = tape.slice(&x, 1, 0, 1)?;
                let first = tape.reshape(&first, vec![b, h])?;
                let pooled = tape.linear(&first, self.var("head.pool.w"), self.var("head.pool.b"))?;
                let pooled = tape.tanh(&pooled)?;
                let pooled = self.maybe_dropout(tape, &pooled, &mut rng)?;
                tape.linear(&pooled, self.var("head.out.w"), self.var("head.out.b"))
            }
            HeadKind::TokenLabel { .. } => {
                let x = self.maybe_dropout(tape, &x, &mut rng)?;
                tape.linear(&x, self.var("head.out.w"), self.var("head.out.b"))
            }
            HeadKind::MaskedLm => {
                let t = tape.linear(&x, self.var("head.transform.w"), self.var("head.transform.b"))?;
                let t = tape.gelu(&t)?;
                let t = tape.layer_norm(&t, self.var("head.ln.g"), self.var("head.ln.b"), cfg.ln_eps)?;
                // decoder tied to the token embedding
                let logits = tape.matmul_transb(&t, self.var("embed.tok"))?;
                tape.add(&logits, self.var("head.out.b"))
            }
        }
    }

    /// Anchor representation at each encoder depth, in eval mode: the
    /// first-token hidden state, or the mean over unpadded tokens when
    /// `mean_tokens` is set. Entry 0 is the embedding output (the input to
    /// block 0); entry `i + 1` follows block `i` — `n_layers + 1` in all,
    /// each `[batch, hidden]`.
    pub fn layer_anchors(&self, batch: &Batch, mean_tokens: bool) -> Result<Vec<Tensor>> {
        let cfg = &self.config;
        let (b, s, h) = (batch.batch, batch.seq, cfg.hidden);
        let tape = Tape::inference();
        let mut rng = None;
        let x_tok = tape.gather(self.var("embed.tok"), &batch.token_ids, &[b, s])?;
        let pos_ids: Vec<usize> = (0..b).flat_map(|_| 0..s).collect();
        let x_pos = tape.gather(self.var("embed.pos"), &pos_ids, &[b, s])?;
        let mut x = tape.add(&x_tok, &x_pos)?;
        let bias = Var::constant(batch.attn_bias());
        let anchor_of = |hidden: &Tensor| {
            let mut anchor = Tensor::zeros(&[b, h]);
            for r in 0..b {
                let dst = &mut anchor.data_mut()[r * h..(r + 1) * h];
                if mean_tokens {
                    let len = batch.lengths[r].min(s).max(1);
                    for p in 0..len {
                        for (d, v) in dst.iter_mut().enumerate() {
                            *v += hidden.data()[(r * s + p) * h + d];
                        }
                    }
                    for v in dst.iter_mut() {
                        *v /= len as f32;
                    }
                } else {
                    dst.copy_from_slice(&hidden.data()[(r * s) * h..(r * s) * h + h]);
                }
            }
            anchor
        };
        let mut anchors = Vec::with_capacity(cfg.n_layers() + 1);
        anchors.push(anchor_of(&x.value()));
        for i in 0..cfg.n_layers() {
            x = self.layer_forward(&tape, &x, i, b, s, &bias, &mut rng)?;
            anchors.push(anchor_of(&x.value()));
        }
        Ok(anchors)
    }

    #[allow(clippy::too_many_arguments)]
    fn layer_forward(
        &self,
        tape: &Tape,
        x: &Var,
        i: usize,
        b: usize,
        s: usize,
        attn_bias: &Var,
        rng: &mut Option<&mut ChaCha8Rng>,
    ) -> Result<Var> {
        let cfg = &self.config;
        let l = cfg.layers[i];
        let a = l.heads * l.head_dim;
        let p = |suffix: &str| self.var(&format!("layer.{i}.{suffix}"));

        let split = |t: &Var| -> Result<Var> {
            let t = tape.reshape(t, vec![b, s, l.heads, l.head_dim])?;
            tape.transpose(&t, 1, 2) // [b, heads, s, head_dim]
        };
        let q = split(&tape.linear(x, p("attn.q.w"), p("attn.q.b"))?)?;
        let k = split(&tape.linear(x, p("attn.k.w"), p("attn.k.b"))?)?;
        let v = split(&tape.linear(x, p("attn.v.w"), p("attn.v.b"))?)?;

        let scores = tape.matmul_transb(&q, &k)?; // [b, heads, s, s]
        let scores = tape.scale(&scores, 1.0 / (l.head_dim as f32).sqrt())?;
        let scores = tape.add(&scores, attn_bias)?;
        let mut attn = tape.softmax(&scores)?;
        attn = self.maybe_dropout(tape, &attn, rng)?;

        let ctx = tape.matmul(&attn, &v)?; // [b, heads, s, head_dim]
        let ctx = tape.transpose(&ctx, 1, 2)?;
        let ctx = tape.reshape(&ctx, vec![b, s, a])?;
        let mut out = tape.linear(&ctx, p("attn.o.w"), p("attn.o.b"))?;
        out = self.maybe_dropout(tape, &out, rng)?;
        let x = tape.layer_norm(&tape.add(x, &out)?, p("ln1.g"), p("ln1.b"), cfg.ln_eps)?;

        let mut ff = tape.linear(&x, p("ffn.w1"), p("ffn.b1"))?;
        ff = tape.gelu(&ff)?;
        ff = tape.linear(&ff, p("ffn.w2"), p("ffn.b2"))?;
        ff = self.maybe_dropout(tape, &ff, rng)?;
        tape.layer_norm(&tape.add(&x, &ff)?, p("ln2.g"), p("ln2.b"), cfg.ln_eps)
    }
}
