//! Training loops: masked-token pretraining, supervised fine-tuning with
//! early stopping, hyperparameter grid search, and evaluation.
//!
//! Everything here is deterministic given (seed, data, config) on a fixed
//! thread count; epoch shuffles and dropout masks use seeds derived from the
//! configured one. Validation loss drives both early stopping and model
//! selection; metrics are reported alongside but never select.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{make_batches, BatchTargets, Dataset, EncodedDataset, IGNORE};
use crate::error::{GcError, Result};
use crate::metrics::{
    classification_metrics, multilabel_metrics, regression_metrics, token_metrics, Metrics,
};
use crate::model::{Batch, Checkpoint, HeadKind, ModelVars};
use crate::tensor::{AdamW, Tape, Var, zero_grads};
use crate::tokenizer::{Tokenizer, CLS_ID, SEP_ID, SPECIALS};

/// Fine-tuning learning-rate grid (6 points, searched in this order).
pub const FINETUNE_LR_GRID: [f64; 6] = [1e-4, 3e-4, 1e-5, 3e-5, 5e-5, 1e-6];
/// Distillation grids: learning rate × temperature × task-loss weight.
pub const DISTILL_LR_GRID: [f64; 5] = [1e-5, 3e-5, 5e-5, 7e-5, 1e-4];
pub const DISTILL_T_GRID: [f64; 4] = [1.0, 5.0, 10.0, 15.0];
pub const DISTILL_A_GRID: [f64; 3] = [0.1, 0.3, 0.6];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    WarmupCosine,
    Constant,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Consecutive non-improving validation epochs tolerated before stopping.
    pub patience: usize,
    /// Fraction of total steps spent in linear warmup.
    pub warmup_fraction: f64,
    pub schedule: Schedule,
    pub weight_decay: f32,
    pub seed: u64,
    /// Sequence cap for fine-tuning tasks.
    pub max_seq: usize,
    /// Masked-token corruption rate (pretraining only).
    pub mask_rate: f32,
    /// Pretraining phases as (steps, max_len); run in order.
    pub seq_len_phases: Vec<(usize, usize)>,
}

impl Default for TrainConfig {
    fn default() -> TrainConfig {
        TrainConfig {
            lr: 5e-5,
            batch_size: 16,
            max_epochs: 20,
            patience: 3,
            warmup_fraction: 0.05,
            schedule: Schedule::WarmupCosine,
            weight_decay: 0.01,
            seed: 0,
            max_seq: 64,
            mask_rate: 0.15,
            seq_len_phases: vec![],
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(GcError::InvalidConfig(format!("lr must be positive, got {}", self.lr)));
        }
        if self.batch_size == 0 {
            return Err(GcError::InvalidConfig("batch_size must be positive".into()));
        }
        if self.patience > self.max_epochs {
            return Err(GcError::InvalidConfig(format!(
                "patience {} exceeds max_epochs {}",
                self.patience, self.max_epochs
            )));
        }
        if !(0.0..1.0).contains(&self.mask_rate) {
            return Err(GcError::InvalidConfig(format!(
                "mask_rate must be in [0,1), got {}",
                self.mask_rate
            )));
        }
        if !(0.0..=1.0).contains(&self.warmup_fraction) {
            return Err(GcError::InvalidConfig("warmup_fraction must be in [0,1]".into()));
        }
        Ok(())
    }

    /// Learning rate at `step` of `total` steps: linear 0→lr across the
    /// warmup span, then cosine decay to 0 at `total`.
    pub fn lr_at(&self, step: usize, total: usize) -> f64 {
        match self.schedule {
            Schedule::Constant => self.lr,
            Schedule::WarmupCosine => {
                if total == 0 {
                    return 0.0;
                }
                let warm = self.warmup_fraction * total as f64;
                let s = step as f64;
                if s < warm {
                    self.lr * s / warm
                } else if total as f64 <= warm {
                    self.lr
                } else {
                    let progress = (s - warm) / (total as f64 - warm);
                    self.lr * 0.5 * (1.0 + (std::f64::consts::PI * progress.min(1.0)).cos())
                }
            }
        }
    }
}

/// Derive a fresh stream seed from the base config seed; `stream` separates
/// uses (epoch shuffles, dropout, masking) so they never collide.
pub(crate) fn derive_seed(base: u64, stream: u64, index: u64) -> u64 {
    // splitmix64 over the combined words
    let mut z = base ^ stream.rotate_left(24) ^ index.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Early stopping on validation loss: strict improvement resets the counter;
/// `patience` consecutive non-improvements stop training.
pub struct EarlyStopper {
    patience: usize,
    best: f64,
    best_epoch: usize,
    since_best: usize,
}

impl EarlyStopper {
    pub fn new(patience: usize) -> EarlyStopper {
        EarlyStopper { patience, best: f64::INFINITY, best_epoch: 0, since_best: 0 }
    }

    /// Record an epoch's validation loss; returns (improved, should_stop).
    pub fn observe(&mut self, epoch: usize, loss: f64) -> (bool, bool) {
        if loss < self.best {
            self.best = loss;
            self.best_epoch = epoch;
            self.since_best = 0;
            (true, false)
        } else {
            self.since_best += 1;
            (false, self.since_best >= self.patience)
        }
    }

    pub fn best_loss(&self) -> f64 {
        self.best
    }

    pub fn best_epoch(&self) -> usize {
        self.best_epoch
    }
}

/// Corrupt a batch for masked-token pretraining. Each non-special position
/// is selected independently with probability `mask_rate`; a selected
/// position becomes [MASK] 80% of the time, a random non-special token 10%,
/// and stays unchanged 10%. Returns the corrupted batch, a grid-aligned
/// target vector ([`IGNORE`] where unselected), and the selection mask.
pub fn mlm_mask(
    batch: &Batch,
    mask_rate: f32,
    vocab_size: usize,
    seed: u64,
) -> (Batch, Vec<usize>, Vec<bool>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_special = SPECIALS.len();
    let mask_id = crate::tokenizer::MASK_ID;
    let mut corrupted = batch.clone();
    let mut targets = vec![IGNORE; batch.token_ids.len()];
    let mut selected = vec![false; batch.token_ids.len()];
    for (i, &id) in batch.token_ids.iter().enumerate() {
        if id < n_special {
            continue;
        }
        if rng.gen::<f32>() >= mask_rate {
            continue;
        }
        selected[i] = true;
        targets[i] = id;
        let roll: f32 = rng.gen();
        if roll < 0.8 {
            corrupted.token_ids[i] = mask_id;
        } else if roll < 0.9 && vocab_size > n_special {
            corrupted.token_ids[i] = rng.gen_range(n_special..vocab_size);
        } // else: keep the original token
    }
    (corrupted, targets, selected)
}

/// Deterministic 80/10/10 split. Validation and test get ⌈n/10⌉ examples
/// each (at least one); the split is a disjoint partition of the input.
pub fn split_dataset(ds: &Dataset, seed: u64) -> Result<(Dataset, Dataset, Dataset)> {
    let n = ds.examples.len();
    if n < 3 {
        return Err(GcError::InvalidInput(format!("need at least 3 examples to split, got {n}")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_hold = (n.div_ceil(10)).max(1);
    let take = |idx: &[usize]| Dataset {
        examples: idx.iter().map(|&i| ds.examples[i].clone()).collect(),
        kind: ds.kind.clone(),
    };
    let (test_idx, rest) = order.split_at(n_hold);
    let (val_idx, train_idx) = rest.split_at(n_hold.min(rest.len() - 1));
    Ok((take(train_idx), take(val_idx), take(test_idx)))
}

/// Task loss on a batch of logits, differentiable through `tape`.
pub(crate) fn task_loss(tape: &Tape, logits: &Var, targets: &BatchTargets) -> Result<Var> {
    match targets {
        BatchTargets::Labels(labels) => tape.cross_entropy(logits, labels, None),
        BatchTargets::MultiHot(hot) => tape.bce_with_logits(logits, hot),
        BatchTargets::Scores(scores) => tape.mse(logits, scores),
        BatchTargets::TokenTags(tags) => {
            let shape = logits.shape();
            let (b, s, c) = (shape[0], shape[1], shape[2]);
            let flat = tape.reshape(logits, vec![b * s, c])?;
            let (ids, weights) = ignore_to_weights(tags);
            tape.cross_entropy(&flat, &ids, Some(&weights))
        }
    }
}

/// Map an IGNORE-bearing target grid to (class ids, row weights) usable by
/// weighted cross-entropy: ignored rows become class 0 with weight 0.
pub(crate) fn ignore_to_weights(tags: &[usize]) -> (Vec<usize>, Vec<f32>) {
    let ids = tags.iter().map(|&t| if t == IGNORE { 0 } else { t }).collect();
    let weights = tags.iter().map(|&t| if t == IGNORE { 0.0 } else { 1.0 }).collect();
    (ids, weights)
}

// ---------------------------------------------------------------------------
// Evaluation
// ---------------------------------------------------------------------------

/// Evaluation result: mean loss (per example, or per labelled token for
/// token tasks), overall metrics, and per-group breakdowns for datasets
/// carrying group annotations.
#[derive(Debug, Clone, Serialize)]
pub struct Evaluation {
    pub loss: f64,
    pub metrics: Metrics,
    pub per_group: BTreeMap<String, Metrics>,
    pub examples: usize,
}

/// Per-example predictions paired with golds, in dataset order.
enum Preds {
    Single(Vec<(usize, usize)>),
    Multi(Vec<(Vec<bool>, Vec<bool>)>),
    Reg(Vec<(f32, f32)>),
    /// Per example: aligned (pred tag name, gold tag name) sequences.
    Token(Vec<(Vec<String>, Vec<String>)>),
}

fn log_sum_exp(row: &[f32]) -> f64 {
    let m = row.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
    let s: f64 = row.iter().map(|&x| ((x as f64) - m).exp()).sum();
    m + s.ln()
}

fn argmax(row: &[f32]) -> usize {
    let mut best = 0;
    for (i, &x) in row.iter().enumerate() {
        if x > row[best] {
            best = i;
        }
    }
    let _ = best; // placeholder to satisfy pattern below
    best
}

/// Forward a dataset chunk through a model in inference mode, producing
/// per-example losses (f64, accumulated in example order so results do not
/// depend on batching) and predictions.
fn eval_chunk(
    model: &ModelVars,
    data: &EncodedDataset,
    indices: &[usize],
    batch_size: usize,
    max_seq: usize,
) -> Result<(f64, f64, Preds)> {
    let mut loss_sum = 0.0f64;
    let mut unit_count = 0.0f64;
    let tag_names: Vec<String> = match &data.kind {
        crate::data::TargetKind::TokenLabel { tags } => tags.clone(),
        _ => vec![],
    };
    let mut preds = match data.head_kind() {
        HeadKind::SingleLabel { .. } => Preds::Single(vec![]),
        HeadKind::MultiLabel { .. } => Preds::Multi(vec![]),
        HeadKind::Regression => Preds::Reg(vec![]),
        HeadKind::TokenLabel { .. } => Preds::Token(vec![]),
        HeadKind::MaskedLm => {
            return Err(GcError::InvalidConfig("masked-LM checkpoints are not evaluable as tasks".into()))
        }
    };
    let tape = Tape::inference();
    for batch in make_batches(data, indices, batch_size, max_seq)? {
        let logits = model.forward(&tape, &batch.input, None)?;
        let out = logits.value();
        let rows = batch.input.batch;
        match (&batch.targets, &mut preds) {
            (BatchTargets::Labels(golds), Preds::Single(acc)) => {
                let c = out.shape()[1];
                for r in 0..rows {
                    let row = &out.data()[r * c..(r + 1) * c];
                    loss_sum += log_sum_exp(row) - row[golds[r]] as f64;
                    unit_count += 1.0;
                    acc.push((argmax(row), golds[r]));
                }
            }
            (BatchTargets::MultiHot(hot), Preds::Multi(acc)) => {
                let l = out.shape()[1];
                for r in 0..rows {
                    let row = &out.data()[r * l..(r + 1) * l];
                    let gold = &hot.data()[r * l..(r + 1) * l];
                    let mut ex_loss = 0.0f64;
                    for (x, y) in row.iter().zip(gold) {
                        let (x, y) = (*x as f64, *y as f64);
                        ex_loss += x.max(0.0) - x * y + (-x.abs()).exp().ln_1p();
                    }
                    loss_sum += ex_loss / l as f64;
                    unit_count += 1.0;
                    acc.push((row.iter().map(|&x| x > 0.0).collect(), gold.iter().map(|&y| y > 0.5).collect()));
                }
            }
            (BatchTargets::Scores(scores), Preds::Reg(acc)) => {
                for r in 0..rows {
                    let (p, g) = (out.data()[r], scores.data()[r]);
                    loss_sum += (p as f64 - g as f64).powi(2);
                    unit_count += 1.0;
                    acc.push((p, g));
                }
            }
            (BatchTargets::TokenTags(tags), Preds::Token(acc)) => {
                let (s, c) = (out.shape()[1], out.shape()[2]);
                for r in 0..rows {
                    let mut pred_seq = Vec::new();
                    let mut gold_seq = Vec::new();
                    for p in 0..s {
                        let gold = tags[r * s + p];
                        if gold == IGNORE {
                            continue;
                        }
                        let row = &out.data()[(r * s + p) * c..(r * s + p + 1) * c];
                        loss_sum += log_sum_exp(row) - row[gold] as f64;
                        unit_count += 1.0;
                        pred_seq.push(tag_names[argmax(row)].clone());
                        gold_seq.push(tag_names[gold].clone());
                    }
                    acc.push((pred_seq, gold_seq));
                }
            }
            _ => unreachable!("targets always match the dataset kind"),
        }
    }
    Ok((loss_sum, unit_count, preds))
}

fn metrics_from_preds(preds: &Preds, keep: Option<&[bool]>) -> Result<Metrics> {
    macro_rules! filtered {
        ($pairs:expr) => {
            $pairs
                .iter()
                .enumerate()
                .filter(|(i, _)| keep.map_or(true, |k| k[*i]))
                .map(|(_, p)| p.clone())
                .collect::<Vec<_>>()
        };
    }
    match preds {
        Preds::Single(pairs) => {
            let sel: Vec<(usize, usize)> = filtered!(pairs);
            let classes = pairs.iter().flat_map(|&(p, g)| [p, g]).max().unwrap_or(0) + 1;
            let (p, g): (Vec<_>, Vec<_>) = sel.into_iter().unzip();
            classification_metrics(&p, &g, classes)
        }
        Preds::Multi(pairs) => {
            let sel: Vec<(Vec<bool>, Vec<bool>)> = filtered!(pairs);
            let (p, g): (Vec<_>, Vec<_>) = sel.into_iter().unzip();
            multilabel_metrics(&p, &g)
        }
        Preds::Reg(pairs) => {
            let sel: Vec<(f32, f32)> = filtered!(pairs);
            let (p, g): (Vec<_>, Vec<_>) = sel.into_iter().unzip();
            regression_metrics(&p, &g)
        }
        Preds::Token(pairs) => {
            let sel: Vec<(Vec<String>, Vec<String>)> = filtered!(pairs);
            let (p, g): (Vec<_>, Vec<_>) = sel.into_iter().unzip();
            token_metrics(&p, &g)
        }
    }
}

/// Evaluate a checkpoint. With `threads > 1` the dataset is split into
/// contiguous chunks evaluated in parallel (each worker builds its own model
/// from the checkpoint); per-example losses and predictions are merged in
/// dataset order, so results are identical across thread counts.
pub fn evaluate(
    ck: &Checkpoint,
    data: &EncodedDataset,
    batch_size: usize,
    threads: usize,
) -> Result<Evaluation> {
    if data.is_empty() {
        return Err(GcError::InvalidInput("cannot evaluate an empty dataset".into()));
    }
    let max_seq = ck.config.max_seq_len;
    let n = data.len();
    let threads = threads.max(1).min(n);
    let chunk_len = n.div_ceil(threads);
    let all: Vec<usize> = (0..n).collect();
    let parts: Vec<(f64, f64, Preds)> = if threads == 1 {
        let model = ModelVars::from_checkpoint(ck, false)?;
        vec![eval_chunk(&model, data, &all, batch_size, max_seq)?]
    } else {
        std::thread::scope(|scope| {
            let handles: Vec<_> = all
                .chunks(chunk_len)
                .map(|idx| {
                    scope.spawn(move || -> Result<(f64, f64, Preds)> {
                        let model = ModelVars::from_checkpoint(ck, false)?;
                        eval_chunk(&model, data, idx, batch_size, max_seq)
                    })
                })
                .collect();
            handles.into_iter().map(|h| h.join().expect("worker panicked")).collect::<Vec<_>>()
        })
        .into_iter()
        .collect::<Result<Vec<_>>>()?
    };
    let mut loss_sum = 0.0;
    let mut units = 0.0;
    let mut preds = None;
    for (l, u, p) in parts {
        loss_sum += l;
        units += u;
        preds = Some(match (preds.take(), p) {
            (None, p) => p,
            (Some(Preds::Single(mut a)), Preds::Single(b)) => {
                a.extend(b);
                Preds::Single(a)
            }
            (Some(Preds::Multi(mut a)), Preds::Multi(b)) => {
                a.extend(b);
                Preds::Multi(a)
            }
            (Some(Preds::Reg(mut a)), Preds::Reg(b)) => {
                a.extend(b);
                Preds::Reg(a)
            }
            (Some(Preds::Token(mut a)), Preds::Token(b)) => {
                a.extend(b);
                Preds::Token(a)
            }
            _ => unreachable!("chunks share one dataset kind"),
        });
    }
    let preds = preds.expect("at least one chunk");
    let metrics = metrics_from_preds(&preds, None)?;
    let mut per_group = BTreeMap::new();
    let groups: BTreeSet<String> =
        data.examples.iter().filter_map(|e| e.group.clone()).collect();
    for group in groups {
        let keep: Vec<bool> =
            data.examples.iter().map(|e| e.group.as_deref() == Some(group.as_str())).collect();
        per_group.insert(group, metrics_from_preds(&preds, Some(&keep))?);
    }
    Ok(Evaluation {
        loss: if units > 0.0 { loss_sum / units } else { 0.0 },
        metrics,
        per_group,
        examples: n,
    })
}

use std::collections::BTreeSet;

// ---------------------------------------------------------------------------
// Fine-tuning
// ---------------------------------------------------------------------------

/// Supervised fine-tuning with warmup-cosine schedule and early stopping.
/// Returns the best-validation-loss checkpoint and its validation report.
pub fn finetune(
    ck: &Checkpoint,
    train: &EncodedDataset,
    val: &EncodedDataset,
    cfg: &TrainConfig,
) -> Result<(Checkpoint, Evaluation)> {
    cfg.validate()?;
    if ck.config.head != train.head_kind() {
        return Err(GcError::InvalidConfig(format!(
            "model head {:?} does not match dataset targets {:?}",
            ck.config.head,
            train.head_kind()
        )));
    }
    let max_seq = cfg.max_seq.min(ck.config.max_seq_len);
    let model = ModelVars::from_checkpoint(ck, true)?;
    let mut opt = AdamW::new(cfg.weight_decay);
    let mut stopper = EarlyStopper::new(cfg.patience);
    let mut best_ck = ck.clone();
    let steps_per_epoch = train.len().div_ceil(cfg.batch_size);
    let total_steps = cfg.max_epochs * steps_per_epoch;
    let mut step = 0usize;
    for epoch in 1..=cfg.max_epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 1, epoch as u64)));
        let mut dropout_rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 2, epoch as u64));
        for batch in make_batches(train, &order, cfg.batch_size, max_seq)? {
            let lr = cfg.lr_at(step, total_steps);
            step += 1;
            let tape = Tape::new();
            let logits = model.forward(&tape, &batch.input, Some(&mut dropout_rng))?;
            let loss = task_loss(&tape, &logits, &batch.targets)?;
            if !loss.item().is_finite() {
                return Err(GcError::NonFinite("training loss"));
            }
            tape.backward(&loss)?;
            opt.step(&model.params, lr as f32)?;
            zero_grads(&model.params);
        }
        let snapshot = model.to_checkpoint();
        let val_loss = evaluate(&snapshot, val, cfg.batch_size, 1)?.loss;
        let (improved, stop) = stopper.observe(epoch, val_loss);
        if improved {
            best_ck = snapshot;
        }
        if stop {
            break;
        }
    }
    let report = evaluate(&best_ck, val, cfg.batch_size, 1)?;
    Ok((best_ck, report))
}

// ---------------------------------------------------------------------------
// Grid search
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize)]
pub struct GridEntry {
    pub assignment: Vec<(String, f64)>,
    pub val_loss: f64,
    pub primary_metric: f64,
}

pub struct GridOutcome<T> {
    pub best_index: usize,
    pub best_assignment: Vec<(String, f64)>,
    pub best: T,
    pub table: Vec<GridEntry>,
}

/// Exhaustive search over the product of `axes` (rightmost axis fastest).
/// `run` maps an assignment to (validation loss, primary metric, artifact);
/// the entry with the lowest validation loss wins, ties going to the first
/// point in grid order.
pub fn grid_search<T>(
    axes: &[(&str, Vec<f64>)],
    mut run: impl FnMut(&[(String, f64)]) -> Result<(f64, f64, T)>,
) -> Result<GridOutcome<T>> {
    if axes.is_empty() || axes.iter().any(|(_, v)| v.is_empty()) {
        return Err(GcError::InvalidConfig("grid axes must be nonempty".into()));
    }
    let mut table = Vec::new();
    let mut best: Option<(usize, Vec<(String, f64)>, f64, T)> = None;
    let sizes: Vec<usize> = axes.iter().map(|(_, v)| v.len()).collect();
    let combos: usize = sizes.iter().product();
    for flat in 0..combos {
        let mut rem = flat;
        let mut assignment = Vec::with_capacity(axes.len());
        for (axis, (name, values)) in axes.iter().enumerate() {
            let stride: usize = sizes[axis + 1..].iter().product();
            assignment.push((name.to_string(), values[rem / stride]));
            rem %= stride;
        }
        let (val_loss, primary_metric, artifact) = run(&assignment)?;
        table.push(GridEntry { assignment: assignment.clone(), val_loss, primary_metric });
        let better = best.as_ref().map_or(true, |(_, _, bl, _)| val_loss < *bl);
        if better {
            best = Some((flat, assignment, val_loss, artifact));
        }
    }
    let (best_index, best_assignment, _, best) = best.expect("nonempty grid");
    Ok(GridOutcome { best_index, best_assignment, best, table })
}

/// Learning-rate grid search wrapped around [`finetune`].
pub fn finetune_grid(
    ck: &Checkpoint,
    train: &EncodedDataset,
    val: &EncodedDataset,
    cfg: &TrainConfig,
) -> Result<(TrainConfig, Checkpoint, Vec<GridEntry>)> {
    let axes = [("lr", FINETUNE_LR_GRID.to_vec())];
    let out = grid_search(&axes, |assignment| {
        let mut trial = cfg.clone();
        trial.lr = assignment[0].1;
        let (best, report) = finetune(ck, train, val, &trial)?;
        Ok((report.loss, report.metrics.primary, best))
    })?;
    let mut best_cfg = cfg.clone();
    best_cfg.lr = out.best_assignment[0].1;
    Ok((best_cfg, out.best, out.table))
}

// ---------------------------------------------------------------------------
// Masked-token pretraining
// ---------------------------------------------------------------------------

/// Encode sentences as `[CLS] … [SEP]`, truncated to `max_len`.
fn encode_corpus(tok: &Tokenizer, sentences: &[String], max_len: usize) -> Vec<Vec<usize>> {
    sentences
        .iter()
        .map(|s| {
            let ids = tok.encode(s);
            let body = ids.len().min(max_len.saturating_sub(2));
            let mut row = Vec::with_capacity(body + 2);
            row.push(CLS_ID);
            row.extend_from_slice(&ids[..body]);
            row.push(SEP_ID);
            row
        })
        .collect()
}

/// Validation loss and masked-token accuracy under a fixed corruption seed.
fn mlm_validate(
    model: &ModelVars,
    rows: &[Vec<usize>],
    batch_size: usize,
    mask_rate: f32,
    vocab: usize,
    seed: u64,
) -> Result<(f64, f64)> {
    let tape = Tape::inference();
    let mut loss_sum = 0.0;
    let mut correct = 0.0;
    let mut count = 0.0;
    for (bi, chunk) in rows.chunks(batch_size).enumerate() {
        let clean = Batch::new(chunk, usize::MAX)?;
        let (corrupted, targets, _) = mlm_mask(&clean, mask_rate, vocab, derive_seed(seed, 3, bi as u64));
        let logits = model.forward(&tape, &corrupted, None)?;
        let out = logits.value();
        let c = out.shape()[2];
        for (pos, &t) in targets.iter().enumerate() {
            if t == IGNORE {
                continue;
            }
            let row = &out.data()[pos * c..(pos + 1) * c];
            loss_sum += log_sum_exp(row) - row[t] as f64;
            correct += (argmax(row) == t) as u64 as f64;
            count += 1.0;
        }
    }
    if count == 0.0 {
        return Ok((0.0, 0.0));
    }
    Ok((loss_sum / count, correct / count))
}

/// Masked-token pretraining over `cfg.seq_len_phases`. 90% of sentences
/// train; the rest validate under a fixed mask. Returns the checkpoint with
/// the best validation loss and its masked-token top-1 accuracy.
pub fn pretrain_mlm(
    ck: &Checkpoint,
    corpus: &[String],
    tok: &Tokenizer,
    cfg: &TrainConfig,
) -> Result<(Checkpoint, f64)> {
    cfg.validate()?;
    if ck.config.head != HeadKind::MaskedLm {
        return Err(GcError::InvalidConfig("pretraining requires a masked-LM head".into()));
    }
    if corpus.len() < 2 {
        return Err(GcError::InvalidInput("corpus too small to split".into()));
    }
    let vocab = ck.config.vocab_size;
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 4, 0)));
    let n_val = (corpus.len() / 10).max(1);
    let val_sentences: Vec<String> = order[..n_val].iter().map(|&i| corpus[i].clone()).collect();
    let train_sentences: Vec<String> = order[n_val..].iter().map(|&i| corpus[i].clone()).collect();

    let model = ModelVars::from_checkpoint(ck, true)?;
    let mut opt = AdamW::new(cfg.weight_decay);
    let total_steps: usize = cfg.seq_len_phases.iter().map(|&(s, _)| s).sum();
    let mut best = (f64::INFINITY, ck.clone());
    let mut step = 0usize;
    for (phase, &(steps, max_len)) in cfg.seq_len_phases.iter().enumerate() {
        let max_len = max_len.min(ck.config.max_seq_len);
        let train_rows = encode_corpus(tok, &train_sentences, max_len);
        let val_rows = encode_corpus(tok, &val_sentences, max_len);
        let val_every = (steps / 4).max(1);
        let mut epoch = 0u64;
        let mut cursor = train_rows.len(); // forces a shuffle on first step
        let mut order: Vec<usize> = (0..train_rows.len()).collect();
        let mut dropout_rng =
            ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 5, phase as u64));
        for s in 0..steps {
            if cursor >= train_rows.len() {
                epoch += 1;
                order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(
                    cfg.seed,
                    6,
                    (phase as u64) << 32 | epoch,
                )));
                cursor = 0;
            }
            let take = cfg.batch_size.min(train_rows.len() - cursor);
            let rows: Vec<Vec<usize>> =
                order[cursor..cursor + take].iter().map(|&i| train_rows[i].clone()).collect();
            cursor += take;
            let clean = Batch::new(&rows, max_len)?;
            let (corrupted, targets, _) =
                mlm_mask(&clean, cfg.mask_rate, vocab, derive_seed(cfg.seed, 7, step as u64));
            let lr = cfg.lr_at(step, total_steps);
            step += 1;
            let tape = Tape::new();
            let logits = model.forward(&tape, &corrupted, Some(&mut dropout_rng))?;
            let shape = logits.shape();
            let flat = tape.reshape(&logits, vec![shape[0] * shape[1], shape[2]])?;
            let (ids, weights) = ignore_to_weights(&targets);
            if weights.iter().all(|&w| w == 0.0) {
                continue; // nothing masked in this batch
            }
            let loss = tape.cross_entropy(&flat, &ids, Some(&weights))?;
            if !loss.item().is_finite() {
                return Err(GcError::NonFinite("pretraining loss"));
            }
            tape.backward(&loss)?;
            opt.step(&model.params, lr as f32)?;
            zero_grads(&model.params);
            if (s + 1) % val_every == 0 || s + 1 == steps {
                let (val_loss, _) =
                    mlm_validate(&model, &val_rows, cfg.batch_size, cfg.mask_rate, vocab, cfg.seed)?;
                if val_loss < best.0 {
                    best = (val_loss, model.to_checkpoint());
                }
            }
        }
    }
    // accuracy of the selected checkpoint under the phase-2 (final) length
    let final_len = cfg
        .seq_len_phases
        .last()
        .map(|&(_, l)| l.min(ck.config.max_seq_len))
        .unwrap_or(ck.config.max_seq_len);
    let best_model = ModelVars::from_checkpoint(&best.1, false)?;
    let val_rows = encode_corpus(tok, &val_sentences, final_len);
    let (_, acc) =
        mlm_validate(&best_model, &val_rows, cfg.batch_size, cfg.mask_rate, vocab, cfg.seed)?;
    Ok((best.1, acc))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_checkpoint, HeadKind, ModelConfig};
    use crate::synth;

    fn tiny_config(head: HeadKind, vocab: usize) -> ModelConfig {
        ModelConfig {
            vocab_size: vocab,
            max_seq_len: 32,
            hidden: 16,
            layers: vec![crate::model::LayerShape { heads: 2, head_dim: 8, ffn: 32 }; 2],
            head,
            dropout: 0.1,
            ln_eps: 1e-5,
        }
    }

    #[test]
    fn schedule_boundaries_and_shape() {
        let cfg = TrainConfig { lr: 1.0, warmup_fraction: 0.1, ..TrainConfig::default() };
        let total = 100;
        assert_eq!(cfg.lr_at(0, total), 0.0);
        assert!((cfg.lr_at(10, total) - 1.0).abs() < 1e-12); // peak at warmup end
        assert!(cfg.lr_at(100, total).abs() < 1e-12); // cosine reaches 0
        // rises through warmup, decays after
        assert!(cfg.lr_at(5, total) < cfg.lr_at(9, total));
        for s in 10..99 {
            assert!(cfg.lr_at(s, total) >= cfg.lr_at(s + 1, total));
        }
        let flat = TrainConfig { lr: 0.5, schedule: Schedule::Constant, ..TrainConfig::default() };
        assert_eq!(flat.lr_at(0, total), 0.5);
        assert_eq!(flat.lr_at(99, total), 0.5);
    }

    #[test]
    fn early_stopping_script() {
        // strictly worsening after epoch 1, patience 3: stop at epoch 4
        let mut s = EarlyStopper::new(3);
        assert_eq!(s.observe(1, 1.0), (true, false));
        assert_eq!(s.observe(2, 1.1), (false, false));
        assert_eq!(s.observe(3, 1.2), (false, false));
        assert_eq!(s.observe(4, 1.3), (false, true));
        assert_eq!(s.best_epoch(), 1);
        // an improvement resets the counter
        let mut s = EarlyStopper::new(2);
        s.observe(1, 1.0);
        s.observe(2, 1.5);
        assert_eq!(s.observe(3, 0.5), (true, false));
        assert_eq!(s.observe(4, 0.6), (false, false));
        assert_eq!(s.observe(5, 0.7), (false, true));
        assert_eq!(s.best_epoch(), 3);
    }

    #[test]
    fn mask_rate_zero_changes_nothing() {
        let batch = Batch::new(&[vec![2, 7, 8, 9, 3]], 16).unwrap();
        let (corrupted, targets, mask) = mlm_mask(&batch, 0.0, 100, 1);
        assert_eq!(corrupted.token_ids, batch.token_ids);
        assert!(targets.iter().all(|&t| t == IGNORE));
        assert!(mask.iter().all(|&m| !m));
    }

    #[test]
    fn mask_statistics_match_configuration() {
        // one long row of maskable tokens
        let ids: Vec<usize> = (0..10_000).map(|i| 5 + (i % 90)).collect();
        let batch = Batch::new(&[ids.clone()], usize::MAX).unwrap();
        let (corrupted, targets, mask) = mlm_mask(&batch, 0.15, 100, 7);
        let selected: Vec<usize> = mask.iter().enumerate().filter(|(_, &m)| m).map(|(i, _)| i).collect();
        let frac = selected.len() as f64 / ids.len() as f64;
        assert!((frac - 0.15).abs() < 0.01, "selection rate {frac}");
        let masked = selected
            .iter()
            .filter(|&&i| corrupted.token_ids[i] == crate::tokenizer::MASK_ID)
            .count() as f64;
        let unchanged = selected
            .iter()
            .filter(|&&i| corrupted.token_ids[i] == batch.token_ids[i])
            .count() as f64;
        let random = selected.len() as f64 - masked - unchanged;
        let n = selected.len() as f64;
        assert!((masked / n - 0.8).abs() < 0.02, "mask fraction {}", masked / n);
        assert!((random / n - 0.1).abs() < 0.02, "random fraction {}", random / n);
        assert!((unchanged / n - 0.1).abs() < 0.02, "unchanged fraction {}", unchanged / n);
        // selected positions carry their original id as target
        for &i in &selected {
            assert_eq!(targets[i], batch.token_ids[i]);
        }
        // specials never selected
        let with_specials = Batch::new(&[vec![2, 0, 1, 4, 3]], 8).unwrap();
        let (_, t, _) = mlm_mask(&with_specials, 0.99, 100, 3);
        assert!(t.iter().all(|&t| t == IGNORE));
        // determinism
        let again = mlm_mask(&batch, 0.15, 100, 7);
        assert_eq!(again.0.token_ids, corrupted.token_ids);
    }

    #[test]
    fn grid_order_and_tie_breaking() {
        // 2x2 grid, all losses equal: first point wins
        let axes = [("a", vec![1.0, 2.0]), ("b", vec![10.0, 20.0])];
        let mut seen = Vec::new();
        let out = grid_search(&axes, |asg| {
            seen.push((asg[0].1, asg[1].1));
            Ok((0.5, 0.0, ()))
        })
        .unwrap();
        // rightmost axis fastest
        assert_eq!(seen, vec![(1.0, 10.0), (1.0, 20.0), (2.0, 10.0), (2.0, 20.0)]);
        assert_eq!(out.best_index, 0);
        assert_eq!(out.table.len(), 4);
        // distinct losses: minimum wins
        let out = grid_search(&axes, |asg| Ok((asg[0].1 * asg[1].1, 0.0, ()))).unwrap();
        assert_eq!(out.best_assignment, vec![("a".to_string(), 1.0), ("b".to_string(), 10.0)]);
        // published grid sizes
        assert_eq!(FINETUNE_LR_GRID.len(), 6);
        assert_eq!(DISTILL_LR_GRID.len() * DISTILL_T_GRID.len() * DISTILL_A_GRID.len(), 60);
    }

    #[test]
    fn split_is_a_disjoint_partition() {
        let ds = synth::classification(3, 47, 3).unwrap();
        let (train, val, test) = split_dataset(&ds, 9).unwrap();
        assert_eq!(train.examples.len() + val.examples.len() + test.examples.len(), 47);
        assert_eq!(test.examples.len(), 5);
        assert_eq!(val.examples.len(), 5);
        let key = |e: &crate::data::Example| e.text.clone().unwrap();
        let mut all: Vec<String> = train
            .examples
            .iter()
            .chain(&val.examples)
            .chain(&test.examples)
            .map(key)
            .collect();
        all.sort();
        let mut orig: Vec<String> = ds.examples.iter().map(key).collect();
        orig.sort();
        assert_eq!(all, orig);
        assert_eq!(train.kind, ds.kind);
    }

    #[test]
    fn max_epochs_zero_returns_input() {
        let ds = synth::classification(5, 12, 2).unwrap();
        let tok = crate::tokenizer::Tokenizer::train(
            &ds.examples.iter().map(|e| e.text.clone().unwrap()).collect::<Vec<_>>(),
            60,
            1,
        )
        .unwrap();
        let enc = ds.encode(&tok, 32).unwrap();
        let ck = init_checkpoint(&tiny_config(HeadKind::SingleLabel { classes: 2 }, tok.vocab_size()), 1)
            .unwrap();
        let cfg = TrainConfig { max_epochs: 0, patience: 0, ..TrainConfig::default() };
        let (out, report) = finetune(&ck, &enc, &enc, &cfg).unwrap();
        assert_eq!(out.tensors, ck.tensors);
        assert!(report.loss > 0.0);
    }

    #[test]
    fn finetune_is_deterministic_and_learns_separable_task() {
        let ds = synth::classification(11, 80, 2).unwrap();
        let texts: Vec<String> = ds.examples.iter().map(|e| e.text.clone().unwrap()).collect();
        let tok = crate::tokenizer::Tokenizer::train(&texts, 120, 1).unwrap();
        let (train, val, _) = split_dataset(&ds, 1).unwrap();
        let train = train.encode(&tok, 32).unwrap();
        let val = val.encode(&tok, 32).unwrap();
        let mut mc = tiny_config(HeadKind::SingleLabel { classes: 2 }, tok.vocab_size());
        mc.dropout = 0.0;
        let ck = init_checkpoint(&mc, 2).unwrap();
        let cfg = TrainConfig { lr: 3e-3, max_epochs: 20, patience: 20, ..TrainConfig::default() };
        let (best, report) = finetune(&ck, &train, &val, &cfg).unwrap();
        let (best2, report2) = finetune(&ck, &train, &val, &cfg).unwrap();
        assert_eq!(best.tensors, best2.tensors, "same seed, same result");
        assert_eq!(report.loss, report2.loss);
        assert!(
            report.metrics.values["accuracy"] >= 0.9,
            "separable task should be learnable, got {:?}",
            report.metrics
        );
    }

    #[test]
    fn evaluate_is_thread_count_invariant() {
        let ds = synth::classification(13, 30, 3).unwrap();
        let texts: Vec<String> = ds.examples.iter().map(|e| e.text.clone().unwrap()).collect();
        let tok = crate::tokenizer::Tokenizer::train(&texts, 80, 1).unwrap();
        let enc = ds.encode(&tok, 32).unwrap();
        let ck = init_checkpoint(&tiny_config(HeadKind::SingleLabel { classes: 3 }, tok.vocab_size()), 3)
            .unwrap();
        let one = evaluate(&ck, &enc, 4, 1).unwrap();
        let four = evaluate(&ck, &enc, 4, 4).unwrap();
        assert_eq!(one.loss.to_bits(), four.loss.to_bits());
        assert_eq!(one.metrics, four.metrics);
        assert_eq!(one.per_group, four.per_group);
        assert!(!one.per_group.is_empty(), "synthetic classification carries groups");
    }

    #[test]
    fn pretraining_zero_steps_returns_input() {
        let corpus = synth::corpus(1, 30);
        let tok = crate::tokenizer::Tokenizer::train(&corpus, 100, 1).unwrap();
        let ck = init_checkpoint(&tiny_config(HeadKind::MaskedLm, tok.vocab_size()), 4).unwrap();
        let cfg = TrainConfig { seq_len_phases: vec![], ..TrainConfig::default() };
        let (out, _) = pretrain_mlm(&ck, &corpus, &tok, &cfg).unwrap();
        assert_eq!(out.tensors, ck.tensors);
    }

    #[test]
    fn pretraining_improves_validation_loss() {
        let corpus = synth::corpus(2, 120);
        let tok = crate::tokenizer::Tokenizer::train(&corpus, 120, 1).unwrap();
        let ck = init_checkpoint(&tiny_config(HeadKind::MaskedLm, tok.vocab_size()), 5).unwrap();
        let cfg = TrainConfig {
            lr: 3e-3,
            seq_len_phases: vec![(30, 16), (10, 32)],
            ..TrainConfig::default()
        };
        let (out, acc) = pretrain_mlm(&ck, &corpus, &tok, &cfg).unwrap();
        // compare validation loss of trained vs initial checkpoint
        let model_new = ModelVars::from_checkpoint(&out, false).unwrap();
        let model_old = ModelVars::from_checkpoint(&ck, false).unwrap();
        let rows = encode_corpus(&tok, &corpus[..12].to_vec(), 32);
        let (new_loss, _) = mlm_validate(&model_new, &rows, 16, 0.15, tok.vocab_size(), 0).unwrap();
        let (old_loss, _) = mlm_validate(&model_old, &rows, 16, 0.15, tok.vocab_size(), 0).unwrap();
        assert!(new_loss < old_loss, "pretraining should reduce loss: {new_loss} vs {old_loss}");
        assert!((0.0..=1.0).contains(&acc));
    }
}
