//! Response-based knowledge distillation: a frozen teacher's logits become
//! soft targets for a smaller student, combined with the original task loss
//! as `L = a·L_task + (1−a)·L_distill`.
//!
//! The distillation term depends on the head: softened KL for single-label
//! and token classification (with the usual T² correction so gradients stay
//! O(1) in the temperature), soft-target binary cross-entropy for
//! multi-label, and plain MSE for regression. Teacher logits are cached per
//! example once — padding cannot change them, so cached rows are bit-stable
//! across batch compositions.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{make_batches, BatchTargets, EncodedDataset, IGNORE};
use crate::error::{GcError, Result};
use crate::model::{extract_layers, Checkpoint, HeadKind, ModelVars};
use crate::tensor::{zero_grads, AdamW, Tape, Tensor, Var};
use crate::train::{derive_seed, evaluate, task_loss, EarlyStopper, Evaluation, Schedule, TrainConfig};

/// Pipeline rule: insert a teacher assistant when the teacher has more than
/// this many times the target's parameters.
pub const ASSISTANT_TRIGGER_RATIO: f64 = 16.0;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DistillConfig {
    /// Softmax/sigmoid softening temperature.
    pub temperature: f64,
    /// Weight `a` of the original task loss; `1−a` goes to distillation.
    pub task_weight: f64,
    pub lr: f64,
    pub epochs: usize,
    pub patience: usize,
    pub seed: u64,
    pub batch_size: usize,
    pub max_seq: usize,
    pub warmup_fraction: f64,
    pub weight_decay: f32,
}

impl Default for DistillConfig {
    fn default() -> DistillConfig {
        DistillConfig {
            temperature: 5.0,
            task_weight: 0.3,
            lr: 5e-5,
            epochs: 20,
            patience: 3,
            seed: 0,
            batch_size: 16,
            max_seq: 64,
            warmup_fraction: 0.05,
            weight_decay: 0.01,
        }
    }
}

impl DistillConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature.is_finite() && self.temperature > 0.0) {
            return Err(GcError::InvalidConfig(format!(
                "temperature must be positive, got {}",
                self.temperature
            )));
        }
        if !(0.0..=1.0).contains(&self.task_weight) {
            return Err(GcError::InvalidConfig(format!(
                "task_weight must be in [0,1], got {}",
                self.task_weight
            )));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(GcError::InvalidConfig("lr must be positive".into()));
        }
        if self.patience > self.epochs {
            return Err(GcError::InvalidConfig("patience exceeds epochs".into()));
        }
        Ok(())
    }

    fn train_view(&self) -> TrainConfig {
        TrainConfig {
            lr: self.lr,
            batch_size: self.batch_size,
            max_epochs: self.epochs,
            patience: self.patience,
            warmup_fraction: self.warmup_fraction,
            schedule: Schedule::WarmupCosine,
            weight_decay: self.weight_decay,
            seed: self.seed,
            max_seq: self.max_seq,
            mask_rate: 0.0,
            seq_len_phases: vec![],
        }
    }
}

/// Positions (into a `batch × seq` grid) that attention can see: `p <
/// lengths[r]`. Distillation for token heads runs over these.
fn unpadded_positions(lengths: &[usize], seq: usize) -> Vec<usize> {
    let mut keep = Vec::new();
    for (r, &len) in lengths.iter().enumerate() {
        for p in 0..len.min(seq) {
            keep.push(r * seq + p);
        }
    }
    keep
}

/// The combined distillation objective on one batch, differentiable with
/// respect to the student logits. `teacher` must have the student's logit
/// shape; for token heads `lengths` gives real (unpadded) row lengths.
pub fn distill_loss(
    tape: &Tape,
    head: &HeadKind,
    teacher: &Tensor,
    student: &Var,
    targets: &BatchTargets,
    lengths: &[usize],
    cfg: &DistillConfig,
) -> Result<Var> {
    cfg.validate()?;
    if teacher.shape() != student.shape() {
        return Err(GcError::ShapeMismatch {
            op: "distill_loss",
            detail: format!("teacher {:?} vs student {:?}", teacher.shape(), student.shape()),
        });
    }
    let a = cfg.task_weight as f32;
    if a == 1.0 {
        return task_loss(tape, student, targets);
    }
    let t = cfg.temperature as f32;
    let soft = match head {
        HeadKind::SingleLabel { .. } => {
            let p = Var::constant(softened_softmax(teacher, t));
            let q = tape.softmax(&tape.scale(student, 1.0 / t)?)?;
            tape.scale(&tape.kl_div(&p, &q)?, t * t)?
        }
        HeadKind::TokenLabel { .. } => {
            let shape = teacher.shape().to_vec();
            let (b, s, c) = (shape[0], shape[1], shape[2]);
            let keep = unpadded_positions(lengths, s);
            if keep.is_empty() {
                return Err(GcError::InvalidInput("no unpadded positions to distill".into()));
            }
            let flat = tape.reshape(student, vec![b * s, c])?;
            let q_rows = tape.gather(&flat, &keep, &[keep.len()])?;
            let mut t_rows = Tensor::zeros(&[keep.len(), c]);
            for (m, &pos) in keep.iter().enumerate() {
                t_rows.data_mut()[m * c..(m + 1) * c]
                    .copy_from_slice(&teacher.data()[pos * c..(pos + 1) * c]);
            }
            let p = Var::constant(softened_softmax(&t_rows, t));
            let q = tape.softmax(&tape.scale(&q_rows, 1.0 / t)?)?;
            tape.scale(&tape.kl_div(&p, &q)?, t * t)?
        }
        HeadKind::MultiLabel { .. } => {
            let soft_targets = teacher.map(|x| sigmoid(x / t));
            tape.bce_with_logits(&tape.scale(student, 1.0 / t)?, &soft_targets)?
        }
        HeadKind::Regression => tape.mse(student, teacher)?,
        HeadKind::MaskedLm => {
            return Err(GcError::InvalidConfig("masked-LM heads are not distillation targets".into()))
        }
    };
    if a == 0.0 {
        return Ok(soft);
    }
    let task = task_loss(tape, student, targets)?;
    tape.add(&tape.scale(&task, a)?, &tape.scale(&soft, 1.0 - a)?)
}

fn sigmoid(x: f32) -> f32 {
    1.0 / (1.0 + (-x).exp())
}

/// Row-wise softmax of `logits / t` (over the last axis).
fn softened_softmax(logits: &Tensor, t: f32) -> Tensor {
    let shape = logits.shape().to_vec();
    let c = *shape.last().expect("non-scalar");
    let mut out = logits.clone();
    for row in out.data_mut().chunks_mut(c) {
        let m = row.iter().fold(f32::NEG_INFINITY, |a, &b| a.max(b / t));
        let mut sum = 0.0;
        for x in row.iter_mut() {
            *x = (*x / t - m).exp();
            sum += *x;
        }
        for x in row.iter_mut() {
            *x /= sum;
        }
    }
    out
}

/// Per-example teacher logits over a dataset, computed in eval mode in
/// dataset order. Sequence heads cache one logit row per example; token
/// heads cache `len × classes` (unpadded positions only).
fn cache_teacher_logits(
    teacher: &Checkpoint,
    data: &EncodedDataset,
    batch_size: usize,
    max_seq: usize,
) -> Result<Vec<Vec<f32>>> {
    let model = ModelVars::from_checkpoint(teacher, false)?;
    let tape = Tape::inference();
    let order: Vec<usize> = (0..data.len()).collect();
    let mut cache = vec![Vec::new(); data.len()];
    for batch in make_batches(data, &order, batch_size, max_seq)? {
        let logits = model.forward(&tape, &batch.input, None)?;
        let out = logits.value();
        match out.shape().len() {
            2 => {
                let c = out.shape()[1];
                for (r, &i) in batch.rows.iter().enumerate() {
                    cache[i] = out.data()[r * c..(r + 1) * c].to_vec();
                }
            }
            _ => {
                let (s, c) = (out.shape()[1], out.shape()[2]);
                for (r, &i) in batch.rows.iter().enumerate() {
                    let len = batch.input.lengths[r].min(s);
                    cache[i] = out.data()[(r * s) * c..(r * s + len) * c].to_vec();
                }
            }
        }
    }
    Ok(cache)
}

/// Assemble the cached teacher logits for one batch into the student's
/// logit-grid shape (zeros at padding; padding is never distilled).
fn teacher_batch_tensor(
    cache: &[Vec<f32>],
    rows: &[usize],
    head: &HeadKind,
    seq: usize,
    lengths: &[usize],
) -> Tensor {
    match head {
        HeadKind::TokenLabel { classes } => {
            let c = *classes;
            let mut t = Tensor::zeros(&[rows.len(), seq, c]);
            for (r, &i) in rows.iter().enumerate() {
                let len = lengths[r].min(seq);
                t.data_mut()[(r * seq) * c..(r * seq + len) * c]
                    .copy_from_slice(&cache[i][..len * c]);
            }
            t
        }
        _ => {
            let c = cache[rows[0]].len();
            let mut t = Tensor::zeros(&[rows.len(), c]);
            for (r, &i) in rows.iter().enumerate() {
                t.data_mut()[r * c..(r + 1) * c].copy_from_slice(&cache[i]);
            }
            t
        }
    }
}

fn softmax_f64(row: &[f32], t: f64) -> Vec<f64> {
    let m = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b as f64 / t));
    let exps: Vec<f64> = row.iter().map(|&x| (x as f64 / t - m).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.iter().map(|&e| e / sum).collect()
}

fn log_sum_exp_f64(row: &[f32]) -> f64 {
    let m = row.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
    m + row.iter().map(|&x| ((x as f64) - m).exp()).sum::<f64>().ln()
}

/// Validation value of the combined objective, accumulated per example in
/// f64 so it is independent of batch composition.
fn distill_val_loss(
    student: &Checkpoint,
    cache: &[Vec<f32>],
    data: &EncodedDataset,
    cfg: &DistillConfig,
    max_seq: usize,
) -> Result<f64> {
    let model = ModelVars::from_checkpoint(student, false)?;
    let tape = Tape::inference();
    let order: Vec<usize> = (0..data.len()).collect();
    let (a, t) = (cfg.task_weight, cfg.temperature);
    let (mut task_sum, mut task_n) = (0.0f64, 0.0f64);
    let (mut dist_sum, mut dist_n) = (0.0f64, 0.0f64);
    for batch in make_batches(data, &order, cfg.batch_size, max_seq)? {
        let logits = model.forward(&tape, &batch.input, None)?;
        let out = logits.value();
        let rows = batch.input.batch;
        match &batch.targets {
            BatchTargets::Labels(golds) => {
                let c = out.shape()[1];
                for r in 0..rows {
                    let srow = &out.data()[r * c..(r + 1) * c];
                    task_sum += log_sum_exp_f64(srow) - srow[golds[r]] as f64;
                    task_n += 1.0;
                    let trow = &cache[batch.rows[r]][..];
                    let p = softmax_f64(trow, t);
                    let q = softmax_f64(srow, t);
                    let kl: f64 = p
                        .iter()
                        .zip(&q)
                        .filter(|(&pi, _)| pi > 0.0)
                        .map(|(&pi, &qi)| pi * (pi / qi.max(1e-300)).ln())
                        .sum();
                    dist_sum += t * t * kl;
                    dist_n += 1.0;
                }
            }
            BatchTargets::MultiHot(hot) => {
                let l = out.shape()[1];
                for r in 0..rows {
                    let srow = &out.data()[r * l..(r + 1) * l];
                    let grow = &hot.data()[r * l..(r + 1) * l];
                    let trow = &cache[batch.rows[r]][..];
                    let (mut task, mut dist) = (0.0f64, 0.0f64);
                    for j in 0..l {
                        let (x, y) = (srow[j] as f64, grow[j] as f64);
                        task += x.max(0.0) - x * y + (-x.abs()).exp().ln_1p();
                        let (xs, ys) = (srow[j] as f64 / t, sigmoid((trow[j] as f64 / t) as f32) as f64);
                        dist += xs.max(0.0) - xs * ys + (-xs.abs()).exp().ln_1p();
                    }
                    task_sum += task / l as f64;
                    dist_sum += dist / l as f64;
                    task_n += 1.0;
                    dist_n += 1.0;
                }
            }
            BatchTargets::Scores(scores) => {
                for r in 0..rows {
                    let s = out.data()[r] as f64;
                    task_sum += (s - scores.data()[r] as f64).powi(2);
                    dist_sum += (s - cache[batch.rows[r]][0] as f64).powi(2);
                    task_n += 1.0;
                    dist_n += 1.0;
                }
            }
            BatchTargets::TokenTags(tags) => {
                let (s, c) = (out.shape()[1], out.shape()[2]);
                for r in 0..rows {
                    let len = batch.input.lengths[r].min(s);
                    for p in 0..len {
                        let srow = &out.data()[(r * s + p) * c..(r * s + p + 1) * c];
                        let gold = tags[r * s + p];
                        if gold != IGNORE {
                            task_sum += log_sum_exp_f64(srow) - srow[gold] as f64;
                            task_n += 1.0;
                        }
                        let trow = &cache[batch.rows[r]][p * c..(p + 1) * c];
                        let pd = softmax_f64(trow, t);
                        let qd = softmax_f64(srow, t);
                        let kl: f64 = pd
                            .iter()
                            .zip(&qd)
                            .filter(|(&pi, _)| pi > 0.0)
                            .map(|(&pi, &qi)| pi * (pi / qi.max(1e-300)).ln())
                            .sum();
                        dist_sum += t * t * kl;
                        dist_n += 1.0;
                    }
                }
            }
        }
    }
    let task_mean = if task_n > 0.0 { task_sum / task_n } else { 0.0 };
    let dist_mean = if dist_n > 0.0 { dist_sum / dist_n } else { 0.0 };
    Ok(a * task_mean + (1.0 - a) * dist_mean)
}

fn check_compatible(teacher: &Checkpoint, student: &Checkpoint) -> Result<()> {
    if teacher.config.head != student.config.head {
        return Err(GcError::InvalidConfig(format!(
            "teacher head {:?} differs from student head {:?}",
            teacher.config.head, student.config.head
        )));
    }
    if let (Some(th), Some(sh)) = (&teacher.tokenizer_hash, &student.tokenizer_hash) {
        if th != sh {
            return Err(GcError::InvalidConfig(
                "teacher and student are bound to different tokenizers".into(),
            ));
        }
    }
    if teacher.config.vocab_size != student.config.vocab_size {
        return Err(GcError::InvalidConfig(format!(
            "teacher vocab {} differs from student vocab {}",
            teacher.config.vocab_size, student.config.vocab_size
        )));
    }
    Ok(())
}

/// Train `student` to match the frozen `teacher` on `train`, early-stopping
/// on the validation value of the same combined objective. Returns the best
/// student and its validation task report.
pub fn distill(
    teacher: &Checkpoint,
    student: &Checkpoint,
    train: &EncodedDataset,
    val: &EncodedDataset,
    cfg: &DistillConfig,
) -> Result<(Checkpoint, Evaluation)> {
    cfg.validate()?;
    check_compatible(teacher, student)?;
    if student.config.head != train.head_kind() {
        return Err(GcError::InvalidConfig("student head does not match dataset".into()));
    }
    let max_seq = cfg
        .max_seq
        .min(teacher.config.max_seq_len)
        .min(student.config.max_seq_len);
    let head = student.config.head.clone();
    let train_cache = cache_teacher_logits(teacher, train, cfg.batch_size, max_seq)?;
    let val_cache = cache_teacher_logits(teacher, val, cfg.batch_size, max_seq)?;

    let tcfg = cfg.train_view();
    let model = ModelVars::from_checkpoint(student, true)?;
    let mut opt = AdamW::new(cfg.weight_decay);
    let mut stopper = EarlyStopper::new(cfg.patience);
    let mut best_ck = student.clone();
    let steps_per_epoch = train.len().div_ceil(cfg.batch_size);
    let total_steps = cfg.epochs * steps_per_epoch;
    let mut step = 0usize;
    for epoch in 1..=cfg.epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 11, epoch as u64)));
        let mut dropout_rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 12, epoch as u64));
        for batch in make_batches(train, &order, cfg.batch_size, max_seq)? {
            let lr = tcfg.lr_at(step, total_steps);
            step += 1;
            let tape = Tape::new();
            let logits = model.forward(&tape, &batch.input, Some(&mut dropout_rng))?;
            let teacher_t = teacher_batch_tensor(
                &train_cache,
                &batch.rows,
                &head,
                batch.input.seq,
                &batch.input.lengths,
            );
            let loss = distill_loss(
                &tape,
                &head,
                &teacher_t,
                &logits,
                &batch.targets,
                &batch.input.lengths,
                cfg,
            )?;
            if !loss.item().is_finite() {
                return Err(GcError::NonFinite("distillation loss"));
            }
            tape.backward(&loss)?;
            opt.step(&model.params, lr as f32)?;
            zero_grads(&model.params);
        }
        let snapshot = model.to_checkpoint();
        let val_loss = distill_val_loss(&snapshot, &val_cache, val, cfg, max_seq)?;
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

/// Grid-search learning rate × temperature × task weight for [`distill`],
/// selecting by validation objective with first-in-grid tie-breaking.
pub fn distill_grid(
    teacher: &Checkpoint,
    student: &Checkpoint,
    train: &EncodedDataset,
    val: &EncodedDataset,
    cfg: &DistillConfig,
) -> Result<(DistillConfig, Checkpoint, Vec<crate::train::GridEntry>)> {
    let axes = [
        ("lr", crate::train::DISTILL_LR_GRID.to_vec()),
        ("temperature", crate::train::DISTILL_T_GRID.to_vec()),
        ("task_weight", crate::train::DISTILL_A_GRID.to_vec()),
    ];
    let out = crate::train::grid_search(&axes, |assignment| {
        let mut trial = cfg.clone();
        trial.lr = assignment[0].1;
        trial.temperature = assignment[1].1;
        trial.task_weight = assignment[2].1;
        let (best, report) = distill(teacher, student, train, val, &trial)?;
        let max_seq = trial.max_seq.min(best.config.max_seq_len);
        let val_cache = cache_teacher_logits(teacher, val, trial.batch_size, max_seq)?;
        let val_obj = distill_val_loss(&best, &val_cache, val, &trial, max_seq)?;
        Ok((val_obj, report.metrics.primary, (best, report)))
    })?;
    let mut best_cfg = cfg.clone();
    best_cfg.lr = out.best_assignment[0].1;
    best_cfg.temperature = out.best_assignment[1].1;
    best_cfg.task_weight = out.best_assignment[2].1;
    Ok((best_cfg, out.best.0, out.table))
}

/// Build a teacher assistant: start from `init` (a pre-trained checkpoint of
/// the assistant shape) or fall back to the teacher's first `layers` blocks,
/// then distill from the teacher. The assistant must be strictly smaller
/// than the teacher.
pub fn make_teacher_assistant(
    teacher: &Checkpoint,
    init: Option<&Checkpoint>,
    layers: usize,
    train: &EncodedDataset,
    val: &EncodedDataset,
    cfg: &DistillConfig,
) -> Result<Checkpoint> {
    let start = match init {
        Some(ck) => ck.clone(),
        None => {
            let keep: Vec<usize> = (0..layers).collect();
            extract_layers(teacher, &keep)?
        }
    };
    if start.num_params() >= teacher.num_params() {
        return Err(GcError::InvalidConfig(format!(
            "assistant ({} params) is not smaller than the teacher ({})",
            start.num_params(),
            teacher.num_params()
        )));
    }
    let (assistant, _) = distill(teacher, &start, train, val, cfg)?;
    Ok(assistant)
}
