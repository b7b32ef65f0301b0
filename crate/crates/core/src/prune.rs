//! Structured pruning decisions.
//!
//! Depth pruning picks which encoder blocks survive (five selection
//! strategies, from blind heuristics to anchor-distance greedy search).
//! Width pruning iteratively removes the attention heads and FFN neuron
//! groups whose silencing costs the least calibration loss. Both only
//! *decide*; the actual weight surgery lives in `model`.

use std::ops::Range;

use rand::SeedableRng;
use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::EncodedDataset;
use crate::error::{GcError, Result};
use crate::model::{Batch, Checkpoint, ModelVars, extract_layers, remove_ffn_neurons, remove_heads};
use crate::tensor::Tensor;
use crate::train::evaluate;

/// Batch size used for calibration passes. Per-example losses and anchors
/// are padding-invariant, so this only affects speed, never results.
const CALIB_BATCH: usize = 16;

/// FFN neurons are scored and removed in contiguous groups of
/// `hidden / NEURON_GROUP_DIVISOR` (min 1): per-neuron masking would cost a
/// full calibration pass per neuron for no extra signal at these widths.
pub const NEURON_GROUP_DIVISOR: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistanceMetric {
    Mae,
    Cosine,
}

/// Which per-example vector represents a block's output: the first token's
/// hidden state, or the mean over all unpadded positions (better for
/// token-level tasks, where no single position summarizes the sequence).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnchorKind {
    FirstToken,
    MeanTokens,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "strategy", rename_all = "snake_case")]
pub enum DepthPruneStrategy {
    /// Keep a uniformly random subset (the baseline to beat).
    Random { seed: u64 },
    /// Keep the first k blocks. The default: simplest and, in practice,
    /// the most consistent.
    KeepFirstK,
    /// Keep the last k blocks.
    KeepLastK,
    /// Keep every second block starting at 0; extra slots (when k exceeds
    /// the stride-2 count) fill with the skipped blocks in ascending order.
    EverySecond,
    /// Greedily drop the block whose output anchor sits nearest its
    /// predecessor's — the block that changes the representation least.
    MinPairwiseDistance { metric: DistanceMetric, anchor: AnchorKind },
}

impl DepthPruneStrategy {
    fn needs_calibration(&self) -> bool {
        matches!(self, DepthPruneStrategy::MinPairwiseDistance { .. })
    }
}

/// Pick which `keep_k` of the teacher's blocks survive depth pruning.
/// Returns strictly increasing original layer indices. Calibration data is
/// required by (and only by) `MinPairwiseDistance`.
pub fn select_layers(
    teacher: &Checkpoint,
    keep_k: usize,
    strategy: &DepthPruneStrategy,
    calibration: Option<&EncodedDataset>,
) -> Result<Vec<usize>> {
    let depth = teacher.config.n_layers();
    if keep_k == 0 || keep_k > depth {
        return Err(GcError::InvalidInput(format!(
            "cannot keep {keep_k} of {depth} layers"
        )));
    }
    if strategy.needs_calibration() != calibration.is_some() {
        return Err(GcError::InvalidInput(if strategy.needs_calibration() {
            "min_pairwise_distance requires calibration data".into()
        } else {
            "calibration data is only used by min_pairwise_distance".to_string()
        }));
    }
    match strategy {
        DepthPruneStrategy::Random { seed } => {
            let mut rng = ChaCha8Rng::seed_from_u64(*seed);
            let mut all: Vec<usize> = (0..depth).collect();
            let (picked, _) = all.partial_shuffle(&mut rng, keep_k);
            let mut kept = picked.to_vec();
            kept.sort_unstable();
            Ok(kept)
        }
        DepthPruneStrategy::KeepFirstK => Ok((0..keep_k).collect()),
        DepthPruneStrategy::KeepLastK => Ok((depth - keep_k..depth).collect()),
        DepthPruneStrategy::EverySecond => {
            let mut kept: Vec<usize> = (0..depth).step_by(2).take(keep_k).collect();
            let mut fill = (1..depth).step_by(2);
            while kept.len() < keep_k {
                kept.push(fill.next().expect("k <= depth"));
            }
            kept.sort_unstable();
            Ok(kept)
        }
        DepthPruneStrategy::MinPairwiseDistance { metric, anchor } => {
            select_min_pairwise(teacher, keep_k, *metric, *anchor, calibration.unwrap())
        }
    }
}

fn calibration_batches(data: &EncodedDataset, max_seq: usize) -> Result<Vec<Batch>> {
    if data.is_empty() {
        return Err(GcError::InvalidInput("empty calibration dataset".into()));
    }
    let rows: Vec<Vec<usize>> = data.examples.iter().map(|e| e.ids.clone()).collect();
    rows.chunks(CALIB_BATCH).map(|c| Batch::new(c, max_seq)).collect()
}

/// Mean distance between two anchor matrices, summed over the batch rows
/// (the caller divides by the total example count).
fn anchor_distance_sum(metric: DistanceMetric, a: &Tensor, b: &Tensor) -> f64 {
    let h = a.shape()[1];
    let mut sum = 0.0f64;
    for r in 0..a.shape()[0] {
        let xa = &a.data()[r * h..(r + 1) * h];
        let xb = &b.data()[r * h..(r + 1) * h];
        sum += match metric {
            DistanceMetric::Mae => {
                xa.iter().zip(xb).map(|(x, y)| (x - y).abs() as f64).sum::<f64>() / h as f64
            }
            DistanceMetric::Cosine => {
                let dot: f64 = xa.iter().zip(xb).map(|(x, y)| (x * y) as f64).sum();
                let na: f64 = xa.iter().map(|x| (x * x) as f64).sum::<f64>().sqrt();
                let nb: f64 = xb.iter().map(|x| (x * x) as f64).sum::<f64>().sqrt();
                if na == 0.0 && nb == 0.0 {
                    0.0
                } else if na == 0.0 || nb == 0.0 {
                    1.0
                } else {
                    1.0 - dot / (na * nb)
                }
            }
        };
    }
    sum
}

fn select_min_pairwise(
    teacher: &Checkpoint,
    keep_k: usize,
    metric: DistanceMetric,
    anchor: AnchorKind,
    data: &EncodedDataset,
) -> Result<Vec<usize>> {
    let batches = calibration_batches(data, teacher.config.max_seq_len)?;
    let mean = anchor == AnchorKind::MeanTokens;
    let mut kept: Vec<usize> = (0..teacher.config.n_layers()).collect();
    while kept.len() > keep_k {
        let sub = extract_layers(teacher, &kept)?;
        let model = ModelVars::from_checkpoint(&sub, false)?;
        // dist[j]: current block j's output vs its input (anchors[0] is the
        // embedding output, so every block has a predecessor).
        let mut dist = vec![0.0f64; kept.len()];
        for batch in &batches {
            let anchors = model.layer_anchors(batch, mean)?;
            for (j, d) in dist.iter_mut().enumerate() {
                *d += anchor_distance_sum(metric, &anchors[j + 1], &anchors[j]);
            }
        }
        let mut drop = 0;
        for (j, d) in dist.iter().enumerate() {
            if *d < dist[drop] {
                drop = j;
            }
        }
        kept.remove(drop);
    }
    Ok(kept)
}

/// Zero-mask sensitivity scores: how much the mean calibration loss rises
/// when one unit's output is silenced. Lower = safer to remove.
#[derive(Debug, Clone)]
pub struct Sensitivities {
    /// `heads[layer][head]`
    pub heads: Vec<Vec<f64>>,
    /// `neuron_groups[layer][group]`; group `g` covers FFN rows
    /// `g*group_size .. min((g+1)*group_size, ffn)`.
    pub neuron_groups: Vec<Vec<f64>>,
    pub group_size: usize,
    pub baseline_loss: f64,
}

fn zero_rows(ck: &mut Checkpoint, name: &str, rows: Range<usize>) -> Result<Vec<f32>> {
    let t = ck
        .tensors
        .get_mut(name)
        .ok_or_else(|| GcError::InvalidInput(format!("no tensor named {name}")))?;
    let width: usize = t.shape()[1..].iter().product();
    let span = rows.start * width..rows.end * width;
    let data = t.data_mut();
    let saved = data[span.clone()].to_vec();
    data[span].fill(0.0);
    Ok(saved)
}

fn restore_rows(ck: &mut Checkpoint, name: &str, rows: Range<usize>, saved: &[f32]) {
    let t = ck.tensors.get_mut(name).expect("tensor existed when zeroed");
    let width: usize = t.shape()[1..].iter().product();
    t.data_mut()[rows.start * width..rows.end * width].copy_from_slice(saved);
}

/// Evaluate with the named row ranges zeroed, then restore them.
fn masked_loss(
    ck: &mut Checkpoint,
    edits: &[(String, Range<usize>)],
    data: &EncodedDataset,
) -> Result<f64> {
    let mut saved = Vec::with_capacity(edits.len());
    for (name, rows) in edits {
        saved.push(zero_rows(ck, name, rows.clone())?);
    }
    let loss = evaluate(ck, data, CALIB_BATCH, 1).map(|e| e.loss);
    for ((name, rows), s) in edits.iter().zip(&saved).rev() {
        restore_rows(ck, name, rows.clone(), s);
    }
    loss
}

/// Score every attention head and FFN neuron group by the calibration-loss
/// increase when its output is zero-masked. Masking silences the unit
/// exactly: a head with zeroed value projection contributes nothing through
/// the output projection, and an FFN row with zeroed `w1` row and `b1` entry
/// feeds gelu(0) = 0 into `w2`.
pub fn unit_sensitivities(model: &Checkpoint, calibration: &EncodedDataset) -> Result<Sensitivities> {
    if calibration.is_empty() {
        return Err(GcError::InvalidInput("empty calibration dataset".into()));
    }
    let baseline = evaluate(model, calibration, CALIB_BATCH, 1)?.loss;
    let group_size = (model.config.hidden / NEURON_GROUP_DIVISOR).max(1);
    let mut work = model.clone();
    let mut heads = Vec::with_capacity(model.config.n_layers());
    let mut neuron_groups = Vec::with_capacity(model.config.n_layers());
    for (l, shape) in model.config.layers.iter().enumerate() {
        let mut hs = Vec::with_capacity(shape.heads);
        for h in 0..shape.heads {
            let rows = h * shape.head_dim..(h + 1) * shape.head_dim;
            let edits = [
                (format!("layer.{l}.attn.v.w"), rows.clone()),
                (format!("layer.{l}.attn.v.b"), rows),
            ];
            hs.push(masked_loss(&mut work, &edits, calibration)? - baseline);
        }
        heads.push(hs);
        let n_groups = shape.ffn.div_ceil(group_size);
        let mut gs = Vec::with_capacity(n_groups);
        for g in 0..n_groups {
            let rows = g * group_size..((g + 1) * group_size).min(shape.ffn);
            let edits = [
                (format!("layer.{l}.ffn.w1"), rows.clone()),
                (format!("layer.{l}.ffn.b1"), rows),
            ];
            gs.push(masked_loss(&mut work, &edits, calibration)? - baseline);
        }
        neuron_groups.push(gs);
    }
    Ok(Sensitivities { heads, neuron_groups, group_size, baseline_loss: baseline })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WidthPruneConfig {
    /// Head budget across the whole model; per-layer counts may diverge.
    pub target_total_heads: usize,
    /// Per-layer FFN width target (uniform across layers).
    pub target_ffn_neurons_per_layer: usize,
    /// Units removed per greedy iteration: this many heads globally, and
    /// this many neuron groups per layer.
    pub units_per_iteration: usize,
    /// How many calibration batches sensitivity estimates may consume.
    pub calibration_batches: usize,
}

impl WidthPruneConfig {
    pub fn new(target_total_heads: usize, target_ffn_neurons_per_layer: usize) -> WidthPruneConfig {
        WidthPruneConfig {
            target_total_heads,
            target_ffn_neurons_per_layer,
            units_per_iteration: 1,
            calibration_batches: 4,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.target_total_heads == 0
            || self.target_ffn_neurons_per_layer == 0
            || self.units_per_iteration == 0
            || self.calibration_batches == 0
        {
            return Err(GcError::InvalidConfig(
                "width pruning targets and step sizes must be at least 1".into(),
            ));
        }
        Ok(())
    }
}

/// Iterative greedy width pruning: re-score sensitivities, remove the
/// `units_per_iteration` lowest-scoring heads globally and neuron groups per
/// layer, repeat until the targets are met. Ties break toward the lowest
/// (layer, unit) index; a layer never loses its last head; every iteration
/// strictly shrinks the model.
pub fn prune_width(
    model: &Checkpoint,
    cfg: &WidthPruneConfig,
    calibration: &EncodedDataset,
) -> Result<Checkpoint> {
    cfg.validate()?;
    let depth = model.config.n_layers();
    let total_heads: usize = model.config.layers.iter().map(|l| l.heads).sum();
    let min_ffn = model.config.layers.iter().map(|l| l.ffn).min().unwrap_or(0);
    if cfg.target_total_heads > total_heads
        || cfg.target_total_heads < depth
        || cfg.target_ffn_neurons_per_layer > min_ffn
    {
        return Err(GcError::InvalidInput(format!(
            "width targets ({} heads total, {} ffn per layer) infeasible for a model with \
             {depth} layers, {total_heads} heads, ffn width {min_ffn}",
            cfg.target_total_heads, cfg.target_ffn_neurons_per_layer
        )));
    }
    let n = calibration.len().min(cfg.calibration_batches * CALIB_BATCH);
    let calib = EncodedDataset {
        examples: calibration.examples[..n].to_vec(),
        kind: calibration.kind.clone(),
    };
    let mut ck = model.clone();
    loop {
        let heads_now: usize = ck.config.layers.iter().map(|l| l.heads).sum();
        let head_excess = heads_now - cfg.target_total_heads;
        let ffn_excess: Vec<usize> = ck
            .config
            .layers
            .iter()
            .map(|l| l.ffn - cfg.target_ffn_neurons_per_layer)
            .collect();
        if head_excess == 0 && ffn_excess.iter().all(|&e| e == 0) {
            break;
        }
        let sens = unit_sensitivities(&ck, &calib)?;

        // heads: one global ranking
        let mut candidates: Vec<(f64, usize, usize)> = Vec::new();
        for (l, scores) in sens.heads.iter().enumerate() {
            if ck.config.layers[l].heads > 1 {
                candidates.extend(scores.iter().enumerate().map(|(h, &s)| (s, l, h)));
            }
        }
        candidates.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
        let mut drops: Vec<Vec<usize>> = vec![Vec::new(); depth];
        let mut picked = 0;
        for &(_, l, h) in &candidates {
            if picked == head_excess.min(cfg.units_per_iteration) {
                break;
            }
            if ck.config.layers[l].heads - drops[l].len() > 1 {
                drops[l].push(h);
                picked += 1;
            }
        }
        for (l, mut drop) in drops.into_iter().enumerate() {
            if !drop.is_empty() {
                drop.sort_unstable();
                ck = remove_heads(&ck, l, &drop)?;
            }
        }

        // neuron groups: ranked within each layer
        for l in 0..depth {
            let mut remaining = ffn_excess[l];
            if remaining == 0 {
                continue;
            }
            let mut groups: Vec<(f64, usize)> =
                sens.neuron_groups[l].iter().enumerate().map(|(g, &s)| (s, g)).collect();
            groups.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            let mut drop = Vec::new();
            for &(_, g) in groups.iter().take(cfg.units_per_iteration) {
                if remaining == 0 {
                    break;
                }
                let start = g * sens.group_size;
                let end = ((g + 1) * sens.group_size).min(ck.config.layers[l].ffn);
                // a group may be cut short so the target is hit exactly
                let take = (end - start).min(remaining);
                drop.extend(start..start + take);
                remaining -= take;
            }
            drop.sort_unstable();
            ck = remove_ffn_neurons(&ck, l, &drop)?;
        }
    }
    ck.validate()?;
    Ok(ck)
}
