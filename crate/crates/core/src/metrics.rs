//! Evaluation metrics: classification F1, regression error, and span-level
//! F1 for BIO-tagged token tasks.
//!
//! Macro averages run over the classes that actually occur (in gold or
//! predictions); F1 for a class is `2tp / (2tp + fp + fn)`. Span decoding
//! follows the usual BIO reading: `B-X` opens a span, `I-X` continues one of
//! the same type and otherwise opens a new span, anything else closes it.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{GcError, Result};

/// A named bundle of metric values. `primary` is the task's headline number
/// (macro-F1 for classification, accuracy for regression, span micro-F1 for
/// token labelling) — the value model selection compares.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct Metrics {
    pub primary: f64,
    pub values: BTreeMap<String, f64>,
}

impl Metrics {
    fn new(primary_key: &str, values: BTreeMap<String, f64>) -> Metrics {
        Metrics { primary: values[primary_key], values }
    }
}

fn f1(tp: u64, fp: u64, fn_: u64) -> f64 {
    let denom = 2 * tp + fp + fn_;
    if denom == 0 {
        0.0
    } else {
        2.0 * tp as f64 / denom as f64
    }
}

/// Micro/macro F1 from per-class (tp, fp, fn) counts. Classes with no
/// occurrences anywhere are excluded from the macro average.
fn from_counts(counts: &[(u64, u64, u64)]) -> (f64, f64) {
    let (mut tp, mut fp, mut fn_) = (0u64, 0u64, 0u64);
    let mut macro_sum = 0.0;
    let mut present = 0u64;
    for &(t, f, n) in counts {
        tp += t;
        fp += f;
        fn_ += n;
        if t + f + n > 0 {
            macro_sum += f1(t, f, n);
            present += 1;
        }
    }
    let micro = f1(tp, fp, fn_);
    let macro_ = if present == 0 { 0.0 } else { macro_sum / present as f64 };
    (micro, macro_)
}

/// Single-label multi-class metrics: accuracy, micro-F1, macro-F1.
pub fn classification_metrics(preds: &[usize], golds: &[usize], classes: usize) -> Result<Metrics> {
    if preds.len() != golds.len() || preds.is_empty() {
        return Err(GcError::InvalidInput("prediction/gold length mismatch or empty".into()));
    }
    if preds.iter().chain(golds).any(|&c| c >= classes) {
        return Err(GcError::InvalidInput(format!("class id out of range ({classes})")));
    }
    let mut counts = vec![(0u64, 0u64, 0u64); classes];
    let mut correct = 0u64;
    for (&p, &g) in preds.iter().zip(golds) {
        if p == g {
            counts[p].0 += 1;
            correct += 1;
        } else {
            counts[p].1 += 1;
            counts[g].2 += 1;
        }
    }
    let (micro, macro_) = from_counts(&counts);
    let mut values = BTreeMap::new();
    values.insert("accuracy".into(), correct as f64 / preds.len() as f64);
    values.insert("micro_f1".into(), micro);
    values.insert("macro_f1".into(), macro_);
    Ok(Metrics::new("macro_f1", values))
}

/// Multi-label metrics over per-example indicator vectors.
pub fn multilabel_metrics(preds: &[Vec<bool>], golds: &[Vec<bool>]) -> Result<Metrics> {
    if preds.len() != golds.len() || preds.is_empty() {
        return Err(GcError::InvalidInput("prediction/gold length mismatch or empty".into()));
    }
    let labels = golds[0].len();
    if preds.iter().chain(golds).any(|v| v.len() != labels) {
        return Err(GcError::InvalidInput("inconsistent label vector widths".into()));
    }
    let mut counts = vec![(0u64, 0u64, 0u64); labels];
    for (p, g) in preds.iter().zip(golds) {
        for l in 0..labels {
            match (p[l], g[l]) {
                (true, true) => counts[l].0 += 1,
                (true, false) => counts[l].1 += 1,
                (false, true) => counts[l].2 += 1,
                (false, false) => {}
            }
        }
    }
    let (micro, macro_) = from_counts(&counts);
    let mut values = BTreeMap::new();
    values.insert("micro_f1".into(), micro);
    values.insert("macro_f1".into(), macro_);
    Ok(Metrics::new("macro_f1", values))
}

/// Regression metrics: mean absolute error on raw scores, plus accuracy
/// after rounding both sides half-away-from-zero to integers.
pub fn regression_metrics(preds: &[f32], golds: &[f32]) -> Result<Metrics> {
    if preds.len() != golds.len() || preds.is_empty() {
        return Err(GcError::InvalidInput("prediction/gold length mismatch or empty".into()));
    }
    let n = preds.len() as f64;
    let mae = preds.iter().zip(golds).map(|(&p, &g)| (p as f64 - g as f64).abs()).sum::<f64>() / n;
    let acc = preds
        .iter()
        .zip(golds)
        .filter(|(&p, &g)| p.round() as i64 == g.round() as i64)
        .count() as f64
        / n;
    let mut values = BTreeMap::new();
    values.insert("mae".into(), mae);
    values.insert("accuracy".into(), acc);
    Ok(Metrics::new("accuracy", values))
}

/// Decode a BIO tag sequence into `(start, end_inclusive, type)` spans.
pub fn decode_bio_spans(tags: &[String]) -> Vec<(usize, usize, String)> {
    let mut spans = Vec::new();
    let mut open: Option<(usize, String)> = None;
    for (i, tag) in tags.iter().enumerate() {
        let (kind, ty) = match tag.split_once('-') {
            Some((k @ ("B" | "I"), ty)) => (k, ty.to_string()),
            _ => ("O", String::new()),
        };
        let continues = kind == "I" && open.as_ref().is_some_and(|(_, t)| *t == ty);
        if !continues {
            if let Some((start, t)) = open.take() {
                spans.push((start, i - 1, t));
            }
            // an I- tag with no live span of its type starts a new span
            if kind == "B" || kind == "I" {
                open = Some((i, ty));
            }
        }
    }
    if let Some((start, t)) = open {
        spans.push((start, tags.len() - 1, t));
    }
    spans
}

/// Entity-level metrics: spans count as correct only on exact
/// (start, end, type) match. Micro over all spans; macro over entity types.
pub fn token_metrics(pred_tags: &[Vec<String>], gold_tags: &[Vec<String>]) -> Result<Metrics> {
    if pred_tags.len() != gold_tags.len() || pred_tags.is_empty() {
        return Err(GcError::InvalidInput("prediction/gold length mismatch or empty".into()));
    }
    let mut counts: BTreeMap<String, (u64, u64, u64)> = BTreeMap::new();
    let mut token_correct = 0u64;
    let mut token_total = 0u64;
    for (p, g) in pred_tags.iter().zip(gold_tags) {
        if p.len() != g.len() {
            return Err(GcError::InvalidInput("tag sequence length mismatch".into()));
        }
        token_total += p.len() as u64;
        token_correct += p.iter().zip(g).filter(|(a, b)| a == b).count() as u64;
        let ps = decode_bio_spans(p);
        let gs = decode_bio_spans(g);
        for span in &ps {
            let e = counts.entry(span.2.clone()).or_default();
            if gs.contains(span) {
                e.0 += 1;
            } else {
                e.1 += 1;
            }
        }
        for span in &gs {
            if !ps.contains(span) {
                counts.entry(span.2.clone()).or_default().2 += 1;
            }
        }
    }
    let flat: Vec<(u64, u64, u64)> = counts.values().copied().collect();
    let (micro, macro_) = from_counts(&flat);
    let mut values = BTreeMap::new();
    values.insert("entity_micro_f1".into(), micro);
    values.insert("entity_macro_f1".into(), macro_);
    values.insert(
        "token_accuracy".into(),
        if token_total == 0 { 0.0 } else { token_correct as f64 / token_total as f64 },
    );
    Ok(Metrics::new("entity_micro_f1", values))
}
