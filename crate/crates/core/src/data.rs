//! Task datasets: JSONL ingestion, tokenizer encoding, batching.
//!
//! Four record shapes are accepted, one per task family:
//! `{"text", "label"}` single-label classification, `{"text", "labels"}`
//! multi-label, `{"text", "score"}` regression, `{"tokens", "tags"}`
//! token-level BIO tagging. Every record may carry an optional `"group"`
//! used for per-group metric breakdowns.

use std::collections::BTreeSet;
use std::io::BufRead;
use std::path::Path;

use serde::Deserialize;

use crate::error::{GcError, Result};
use crate::model::{Batch, HeadKind};
use crate::tensor::Tensor;
use crate::tokenizer::{Tokenizer, CLS_ID, SEP_ID};

/// Target index meaning "no loss, no metric" (padding, subword continuations,
/// special tokens) in token-level tasks.
pub const IGNORE: usize = usize::MAX;

#[derive(Debug, Clone, PartialEq)]
pub enum Target {
    Label(usize),
    Labels(Vec<usize>),
    Score(f32),
    Tags(Vec<String>),
}

#[derive(Debug, Clone)]
pub struct Example {
    /// Raw text (sequence tasks) …
    pub text: Option<String>,
    /// … or pre-split words (token tasks).
    pub tokens: Option<Vec<String>>,
    pub target: Target,
    pub group: Option<String>,
}

/// What the targets in a dataset look like, with inferred cardinalities.
#[derive(Debug, Clone, PartialEq)]
pub enum TargetKind {
    SingleLabel { classes: usize },
    MultiLabel { labels: usize },
    Regression,
    TokenLabel { tags: Vec<String> },
}

impl TargetKind {
    pub fn head_kind(&self) -> HeadKind {
        match self {
            TargetKind::SingleLabel { classes } => HeadKind::SingleLabel { classes: *classes },
            TargetKind::MultiLabel { labels } => HeadKind::MultiLabel { labels: *labels },
            TargetKind::Regression => HeadKind::Regression,
            TargetKind::TokenLabel { tags } => HeadKind::TokenLabel { classes: tags.len() },
        }
    }
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub examples: Vec<Example>,
    pub kind: TargetKind,
}

#[derive(Deserialize)]
struct RawRecord {
    text: Option<String>,
    label: Option<i64>,
    labels: Option<Vec<i64>>,
    score: Option<f64>,
    tokens: Option<Vec<String>>,
    tags: Option<Vec<String>>,
    group: Option<String>,
}

impl Dataset {
    pub fn load_jsonl(path: &Path) -> Result<Dataset> {
        let file = std::fs::File::open(path)
            .map_err(|e| GcError::InvalidInput(format!("cannot open {}: {e}", path.display())))?;
        let reader = std::io::BufReader::new(file);
        let mut examples = Vec::new();
        for (lineno, line) in reader.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let raw: RawRecord = serde_json::from_str(&line).map_err(|e| {
                GcError::InvalidInput(format!("{}:{}: {e}", path.display(), lineno + 1))
            })?;
            examples.push(parse_record(raw, path, lineno + 1)?);
        }
        Dataset::from_examples(examples)
    }

    pub fn from_examples(examples: Vec<Example>) -> Result<Dataset> {
        if examples.is_empty() {
            return Err(GcError::InvalidInput("dataset is empty".into()));
        }
        let kind = infer_kind(&examples)?;
        Ok(Dataset { examples, kind })
    }

    /// Serialize back to the JSONL record shapes accepted by [`load_jsonl`].
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for ex in &self.examples {
            let mut rec = serde_json::Map::new();
            if let Some(text) = &ex.text {
                rec.insert("text".into(), text.as_str().into());
            }
            if let Some(tokens) = &ex.tokens {
                rec.insert("tokens".into(), tokens.clone().into());
            }
            match &ex.target {
                Target::Label(l) => rec.insert("label".into(), (*l).into()),
                Target::Labels(ls) => {
                    rec.insert("labels".into(), ls.iter().map(|&l| l as i64).collect::<Vec<_>>().into())
                }
                Target::Score(s) => rec.insert("score".into(), (*s as f64).into()),
                Target::Tags(ts) => rec.insert("tags".into(), ts.clone().into()),
            };
            if let Some(g) = &ex.group {
                rec.insert("group".into(), g.as_str().into());
            }
            out.push_str(&serde_json::Value::Object(rec).to_string());
            out.push('\n');
        }
        out
    }

    /// Tokenize everything. Sequences become `[CLS] … [SEP]`, truncated to
    /// `max_seq`. For token tasks each word's tag lands on its first subword;
    /// continuations and specials get [`IGNORE`].
    pub fn encode(&self, tok: &Tokenizer, max_seq: usize) -> Result<EncodedDataset> {
        if max_seq < 3 {
            return Err(GcError::InvalidConfig("max_seq must be at least 3".into()));
        }
        let tag_index = |t: &str, tags: &[String]| -> usize {
            tags.iter().position(|x| x == t).expect("tag set was built from this data")
        };
        let mut out = Vec::with_capacity(self.examples.len());
        for ex in &self.examples {
            let (ids, target) = match (&ex.text, &ex.tokens, &ex.target) {
                (Some(text), _, t) => {
                    let mut ids = vec![CLS_ID];
                    ids.extend(tok.encode(text));
                    ids.truncate(max_seq - 1);
                    ids.push(SEP_ID);
                    let target = match t {
                        Target::Label(l) => EncodedTarget::Label(*l),
                        Target::Labels(ls) => {
                            let n = match &self.kind {
                                TargetKind::MultiLabel { labels } => *labels,
                                _ => unreachable!(),
                            };
                            let mut hot = vec![0.0f32; n];
                            for &l in ls {
                                hot[l] = 1.0;
                            }
                            EncodedTarget::MultiHot(hot)
                        }
                        Target::Score(s) => EncodedTarget::Score(*s),
                        Target::Tags(_) => {
                            return Err(GcError::InvalidInput(
                                "token tags require a tokens field".into(),
                            ))
                        }
                    };
                    (ids, target)
                }
                (None, Some(words), Target::Tags(tags)) => {
                    let tag_names = match &self.kind {
                        TargetKind::TokenLabel { tags } => tags,
                        _ => unreachable!(),
                    };
                    let mut ids = vec![CLS_ID];
                    let mut tids = vec![IGNORE];
                    for (word, tag) in words.iter().zip(tags) {
                        let sub = tok.encode(word);
                        for (k, id) in sub.iter().enumerate() {
                            ids.push(*id);
                            tids.push(if k == 0 { tag_index(tag, tag_names) } else { IGNORE });
                        }
                    }
                    ids.truncate(max_seq - 1);
                    tids.truncate(max_seq - 1);
                    ids.push(SEP_ID);
                    tids.push(IGNORE);
                    (ids, EncodedTarget::TokenTags(tids))
                }
                _ => return Err(GcError::InvalidInput("record has no usable input field".into())),
            };
            out.push(EncodedExample { ids, target, group: ex.group.clone() });
        }
        Ok(EncodedDataset { examples: out, kind: self.kind.clone() })
    }
}

fn parse_record(raw: RawRecord, path: &Path, lineno: usize) -> Result<Example> {
    let at = || format!("{}:{}", path.display(), lineno);
    let target = match (&raw.label, &raw.labels, &raw.score, &raw.tags) {
        (Some(l), None, None, None) => {
            if *l < 0 {
                return Err(GcError::InvalidInput(format!("{}: negative label", at())));
            }
            Target::Label(*l as usize)
        }
        (None, Some(ls), None, None) => {
            if ls.iter().any(|&l| l < 0) {
                return Err(GcError::InvalidInput(format!("{}: negative label", at())));
            }
            Target::Labels(ls.iter().map(|&l| l as usize).collect())
        }
        (None, None, Some(s), None) => Target::Score(*s as f32),
        (None, None, None, Some(tags)) => Target::Tags(tags.clone()),
        _ => {
            return Err(GcError::InvalidInput(format!(
                "{}: record must have exactly one of label/labels/score/tags",
                at()
            )))
        }
    };
    match (&raw.text, &raw.tokens, &target) {
        (Some(_), None, Target::Tags(_)) | (None, Some(_), Target::Tags(_)) => {}
        (Some(_), None, _) => {}
        _ if raw.tokens.is_some() && matches!(target, Target::Tags(_)) => {}
        _ => {
            return Err(GcError::InvalidInput(format!(
                "{}: text tasks need \"text\", token tasks need \"tokens\"+\"tags\"",
                at()
            )))
        }
    }
    if let (Some(tokens), Target::Tags(tags)) = (&raw.tokens, &target) {
        if tokens.len() != tags.len() {
            return Err(GcError::InvalidInput(format!(
                "{}: {} tokens but {} tags",
                at(),
                tokens.len(),
                tags.len()
            )));
        }
    }
    Ok(Example { text: raw.text, tokens: raw.tokens, target, group: raw.group })
}

fn infer_kind(examples: &[Example]) -> Result<TargetKind> {
    match &examples[0].target {
        Target::Label(_) => {
            let mut max = 0usize;
            for ex in examples {
                match &ex.target {
                    Target::Label(l) => max = max.max(*l),
                    _ => return Err(GcError::InvalidInput("mixed target types in dataset".into())),
                }
            }
            Ok(TargetKind::SingleLabel { classes: max + 1 })
        }
        Target::Labels(_) => {
            let mut max = 0usize;
            for ex in examples {
                match &ex.target {
                    Target::Labels(ls) => max = max.max(ls.iter().copied().max().unwrap_or(0)),
                    _ => return Err(GcError::InvalidInput("mixed target types in dataset".into())),
                }
            }
            Ok(TargetKind::MultiLabel { labels: max + 1 })
        }
        Target::Score(_) => {
            if examples.iter().any(|e| !matches!(e.target, Target::Score(_))) {
                return Err(GcError::InvalidInput("mixed target types in dataset".into()));
            }
            Ok(TargetKind::Regression)
        }
        Target::Tags(_) => {
            let mut tags = BTreeSet::new();
            for ex in examples {
                match &ex.target {
                    Target::Tags(ts) => tags.extend(ts.iter().cloned()),
                    _ => return Err(GcError::InvalidInput("mixed target types in dataset".into())),
                }
            }
            Ok(TargetKind::TokenLabel { tags: tags.into_iter().collect() })
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum EncodedTarget {
    Label(usize),
    MultiHot(Vec<f32>),
    Score(f32),
    /// Aligned with `ids`; [`IGNORE`] marks positions without a target.
    TokenTags(Vec<usize>),
}

#[derive(Debug, Clone)]
pub struct EncodedExample {
    pub ids: Vec<usize>,
    pub target: EncodedTarget,
    pub group: Option<String>,
}

#[derive(Debug, Clone)]
pub struct EncodedDataset {
    pub examples: Vec<EncodedExample>,
    pub kind: TargetKind,
}

impl EncodedDataset {
    pub fn head_kind(&self) -> HeadKind {
        self.kind.head_kind()
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }
}

/// A padded input batch plus its aligned training targets.
#[derive(Debug, Clone)]
pub struct TaskBatch {
    pub input: Batch,
    pub targets: BatchTargets,
    /// Index of each row in the source dataset (for prediction bookkeeping).
    pub rows: Vec<usize>,
}

#[derive(Debug, Clone)]
pub enum BatchTargets {
    Labels(Vec<usize>),
    /// `[batch, labels]`
    MultiHot(Tensor),
    /// `[batch, 1]`
    Scores(Tensor),
    /// `batch * seq`, aligned with the padded grid; [`IGNORE`] where no loss.
    TokenTags(Vec<usize>),
}

/// Slice a dataset into batches following `order` (indices into `examples`).
pub fn make_batches(
    data: &EncodedDataset,
    order: &[usize],
    batch_size: usize,
    max_seq: usize,
) -> Result<Vec<TaskBatch>> {
    if batch_size == 0 {
        return Err(GcError::InvalidConfig("batch_size must be positive".into()));
    }
    let mut out = Vec::with_capacity(order.len().div_ceil(batch_size));
    for chunk in order.chunks(batch_size) {
        let rows: Vec<Vec<usize>> =
            chunk.iter().map(|&i| data.examples[i].ids.clone()).collect();
        let input = Batch::new(&rows, max_seq)?;
        let targets = match &data.kind {
            TargetKind::SingleLabel { .. } => BatchTargets::Labels(
                chunk
                    .iter()
                    .map(|&i| match &data.examples[i].target {
                        EncodedTarget::Label(l) => *l,
                        _ => unreachable!(),
                    })
                    .collect(),
            ),
            TargetKind::MultiLabel { labels } => {
                let mut t = Tensor::zeros(&[chunk.len(), *labels]);
                for (r, &i) in chunk.iter().enumerate() {
                    if let EncodedTarget::MultiHot(hot) = &data.examples[i].target {
                        t.data_mut()[r * labels..(r + 1) * labels].copy_from_slice(hot);
                    }
                }
                BatchTargets::MultiHot(t)
            }
            TargetKind::Regression => {
                let scores: Vec<f32> = chunk
                    .iter()
                    .map(|&i| match &data.examples[i].target {
                        EncodedTarget::Score(s) => *s,
                        _ => unreachable!(),
                    })
                    .collect();
                BatchTargets::Scores(Tensor::new(vec![chunk.len(), 1], scores)?)
            }
            TargetKind::TokenLabel { .. } => {
                let mut tags = vec![IGNORE; chunk.len() * input.seq];
                for (r, &i) in chunk.iter().enumerate() {
                    if let EncodedTarget::TokenTags(ts) = &data.examples[i].target {
                        for (p, &t) in ts.iter().take(input.seq).enumerate() {
                            tags[r * input.seq + p] = t;
                        }
                    }
                }
                BatchTargets::TokenTags(tags)
            }
        };
        out.push(TaskBatch { input, targets, rows: chunk.to_vec() });
    }
    Ok(out)
}
