//! Efficiency accounting: serialized sizes, parameter counts, batch-32
//! latency, and the teacher-relative compression/acceleration ratios that
//! compression reports quote.
//!
//! The latency protocol is one fixed 32-row batch, 5 un-timed warm-up runs,
//! then 30 timed runs on a single thread; we report the mean and the median.
//! "Size" is the byte length of the serialized container, not an in-memory
//! footprint, and both ratios are exact quotients of measured quantities —
//! nothing is rounded before dividing.
//!
//! Checkpoints and optimized graph containers are both accepted; a
//! checkpoint is exported to its computational graph first so that both
//! sides of a comparison run on the same executor.

use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::data::{make_batches, BatchTargets, EncodedDataset, TargetKind, IGNORE};
use crate::error::{GcError, Result};
use crate::graph::{batch_inputs, execute, export_graph, run_logits, Constant, GraphProgram};
use crate::metrics::{
    classification_metrics, multilabel_metrics, regression_metrics, token_metrics, Metrics,
};
use crate::model::{container_kind, load_checkpoint};

/// Rows in the timed batch (Table-8 protocol: "a 32-batch").
pub const BENCH_BATCH: usize = 32;
/// Un-timed runs before measurement starts.
pub const BENCH_WARMUPS: usize = 5;
/// Timed runs per artifact.
pub const BENCH_RUNS: usize = 30;

/// Teacher size over artifact size. Feed it raw measured bytes; the quotient
/// is the paper's "compression rate".
pub fn compression_rate(teacher_size_bytes: u64, artifact_size_bytes: u64) -> f64 {
    teacher_size_bytes as f64 / artifact_size_bytes as f64
}

/// Teacher latency over artifact latency ("acceleration").
pub fn acceleration(teacher_latency_seconds: f64, artifact_latency_seconds: f64) -> f64 {
    teacher_latency_seconds / artifact_latency_seconds
}

/// Latency summary over the timed runs.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LatencyStats {
    pub mean_seconds: f64,
    pub p50_seconds: f64,
}

/// A loaded, benchmarkable artifact. Checkpoints are exported to graphs so
/// latency and predictions come from the same executor for every artifact.
pub struct BenchArtifact {
    pub graph: GraphProgram,
    pub size_bytes: u64,
    pub param_count: u64,
    /// Row length limit for batches fed to this artifact.
    pub max_seq: usize,
}

/// Load either container kind from disk for benchmarking.
pub fn load_artifact(path: &Path) -> Result<BenchArtifact> {
    let size_bytes = std::fs::metadata(path)?.len();
    match container_kind(path)?.as_str() {
        "checkpoint" => {
            let ck = load_checkpoint(path)?;
            Ok(BenchArtifact {
                size_bytes,
                param_count: ck.num_params() as u64,
                max_seq: ck.config.max_seq_len,
                graph: export_graph(&ck)?,
            })
        }
        "graph" => {
            let graph = GraphProgram::load(path)?;
            let param_count = graph
                .initializers
                .values()
                .map(|c| match c {
                    Constant::F32(t) => t.numel() as u64,
                    Constant::I8(q) => q.values.len() as u64,
                })
                .sum();
            // The position table has one row per supported position, which
            // recovers the sequence limit a bare graph no longer states.
            let max_seq = match graph.initializers.get("embed.pos") {
                Some(Constant::F32(t)) => t.shape()[0],
                _ => {
                    return Err(GcError::Graph(
                        "graph has no f32 position table; cannot infer its sequence limit".into(),
                    ))
                }
            };
            Ok(BenchArtifact { graph, size_bytes, param_count, max_seq })
        }
        other => Err(GcError::Container(format!("cannot benchmark a {other:?} container"))),
    }
}

fn median(sorted: &[f64]) -> f64 {
    let n = sorted.len();
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        (sorted[n / 2 - 1] + sorted[n / 2]) / 2.0
    }
}

/// Time `artifact` on one fixed [`BENCH_BATCH`]-row batch drawn from
/// `sample` (rows repeat if the sample is smaller than the batch).
pub fn measure_latency(artifact: &BenchArtifact, sample: &EncodedDataset) -> Result<LatencyStats> {
    if sample.is_empty() {
        return Err(GcError::InvalidInput("latency sample is empty".into()));
    }
    let order: Vec<usize> = (0..BENCH_BATCH).map(|i| i % sample.len()).collect();
    let batch = make_batches(sample, &order, BENCH_BATCH, artifact.max_seq)?.remove(0);
    let inputs = batch_inputs(&batch.input);
    for _ in 0..BENCH_WARMUPS {
        std::hint::black_box(execute(&artifact.graph, &inputs)?);
    }
    let mut secs = Vec::with_capacity(BENCH_RUNS);
    for _ in 0..BENCH_RUNS {
        let start = Instant::now();
        std::hint::black_box(execute(&artifact.graph, &inputs)?);
        secs.push(start.elapsed().as_secs_f64());
    }
    let mean = secs.iter().sum::<f64>() / secs.len() as f64;
    secs.sort_by(f64::total_cmp);
    Ok(LatencyStats { mean_seconds: mean, p50_seconds: median(&secs) })
}

fn argmax(row: &[f32]) -> usize {
    let mut best = 0;
    for (i, &x) in row.iter().enumerate() {
        if x > row[best] {
            best = i;
        }
    }
    best
}

/// Decode task predictions from graph logits and score them. The headline
/// (`primary`) metric is picked per task kind exactly as in checkpoint
/// evaluation: macro-F1 for label tasks, accuracy for regression,
/// entity-level micro-F1 for token tagging.
pub fn evaluate_graph(
    g: &GraphProgram,
    data: &EncodedDataset,
    batch_size: usize,
    max_seq: usize,
) -> Result<Metrics> {
    if data.is_empty() {
        return Err(GcError::InvalidInput("cannot evaluate an empty dataset".into()));
    }
    let order: Vec<usize> = (0..data.len()).collect();
    let tag_names: Vec<String> = match &data.kind {
        TargetKind::TokenLabel { tags } => tags.clone(),
        _ => vec![],
    };
    let mut single: Vec<(usize, usize)> = Vec::new();
    let mut multi: Vec<(Vec<bool>, Vec<bool>)> = Vec::new();
    let mut reg: Vec<(f32, f32)> = Vec::new();
    let mut token: Vec<(Vec<String>, Vec<String>)> = Vec::new();
    for batch in make_batches(data, &order, batch_size, max_seq)? {
        let out = run_logits(g, &batch.input)?;
        let rows = batch.input.batch;
        match &batch.targets {
            BatchTargets::Labels(golds) => {
                let c = out.shape()[1];
                for r in 0..rows {
                    single.push((argmax(&out.data()[r * c..(r + 1) * c]), golds[r]));
                }
            }
            BatchTargets::MultiHot(hot) => {
                let l = out.shape()[1];
                for r in 0..rows {
                    let row = &out.data()[r * l..(r + 1) * l];
                    let gold = &hot.data()[r * l..(r + 1) * l];
                    multi.push((
                        row.iter().map(|&x| x > 0.0).collect(),
                        gold.iter().map(|&y| y > 0.5).collect(),
                    ));
                }
            }
            BatchTargets::Scores(scores) => {
                for r in 0..rows {
                    reg.push((out.data()[r], scores.data()[r]));
                }
            }
            BatchTargets::TokenTags(tags) => {
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
                        pred_seq.push(tag_names[argmax(row)].clone());
                        gold_seq.push(tag_names[gold].clone());
                    }
                    token.push((pred_seq, gold_seq));
                }
            }
        }
    }
    match &data.kind {
        TargetKind::SingleLabel { classes } => {
            let (p, g): (Vec<_>, Vec<_>) = single.into_iter().unzip();
            classification_metrics(&p, &g, *classes)
        }
        TargetKind::MultiLabel { .. } => {
            let (p, g): (Vec<_>, Vec<_>) = multi.into_iter().unzip();
            multilabel_metrics(&p, &g)
        }
        TargetKind::Regression => {
            let (p, g): (Vec<_>, Vec<_>) = reg.into_iter().unzip();
            regression_metrics(&p, &g)
        }
        TargetKind::TokenLabel { .. } => {
            let (p, g): (Vec<_>, Vec<_>) = token.into_iter().unzip();
            token_metrics(&p, &g)
        }
    }
}

/// The same evaluation examples encoded once per model. Vocabulary pruning
/// renumbers token ids, so an artifact and its teacher generally disagree on
/// tokenization; callers hand us a correctly-encoded sample for each side.
#[derive(Clone, Copy)]
pub struct SamplePair<'a> {
    pub artifact: &'a EncodedDataset,
    pub teacher: &'a EncodedDataset,
}

impl<'a> SamplePair<'a> {
    /// Both models read the same tokenizer's ids (no vocabulary pruning
    /// between them).
    pub fn shared(data: &'a EncodedDataset) -> SamplePair<'a> {
        SamplePair { artifact: data, teacher: data }
    }
}

fn headline_name(kind: &TargetKind) -> &'static str {
    match kind {
        TargetKind::SingleLabel { .. } | TargetKind::MultiLabel { .. } => "macro_f1",
        TargetKind::Regression => "accuracy",
        TargetKind::TokenLabel { .. } => "entity_micro_f1",
    }
}

/// Size / latency / performance comparison of a compressed artifact against
/// its teacher.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EfficiencyReport {
    pub size_bytes: u64,
    pub param_count: u64,
    pub mean_latency_seconds: f64,
    pub p50_latency_seconds: f64,
    pub teacher_size_bytes: u64,
    pub teacher_param_count: u64,
    pub teacher_mean_latency_seconds: f64,
    pub teacher_p50_latency_seconds: f64,
    /// teacher_size_bytes / size_bytes, unrounded.
    pub compression_rate: f64,
    /// teacher mean latency / artifact mean latency, unrounded.
    pub acceleration: f64,
    /// Name of the headline metric the delta is measured in.
    pub metric_name: String,
    pub metric: f64,
    pub teacher_metric: f64,
    /// Headline-metric change vs the teacher, in percentage points.
    pub performance_delta_pp: f64,
    pub batch_size: usize,
    pub warmup_runs: usize,
    pub timed_runs: usize,
    /// Benchmarking is forced single-threaded; recorded for honesty.
    pub threads: usize,
}

/// Measure an artifact against a teacher: serialized sizes, batch-32 mean
/// and median latency, their exact ratios, and the headline-metric delta on
/// the given sample.
pub fn efficiency_stats(
    artifact_path: &Path,
    teacher_path: &Path,
    sample: SamplePair,
) -> Result<EfficiencyReport> {
    if sample.artifact.len() != sample.teacher.len() || sample.artifact.kind != sample.teacher.kind
    {
        return Err(GcError::InvalidInput(
            "artifact and teacher samples must hold the same examples".into(),
        ));
    }
    let artifact = load_artifact(artifact_path)?;
    let teacher = load_artifact(teacher_path)?;
    let lat = measure_latency(&artifact, sample.artifact)?;
    let teacher_lat = measure_latency(&teacher, sample.teacher)?;
    let metrics = evaluate_graph(&artifact.graph, sample.artifact, BENCH_BATCH, artifact.max_seq)?;
    let teacher_metrics =
        evaluate_graph(&teacher.graph, sample.teacher, BENCH_BATCH, teacher.max_seq)?;
    Ok(EfficiencyReport {
        size_bytes: artifact.size_bytes,
        param_count: artifact.param_count,
        mean_latency_seconds: lat.mean_seconds,
        p50_latency_seconds: lat.p50_seconds,
        teacher_size_bytes: teacher.size_bytes,
        teacher_param_count: teacher.param_count,
        teacher_mean_latency_seconds: teacher_lat.mean_seconds,
        teacher_p50_latency_seconds: teacher_lat.p50_seconds,
        compression_rate: compression_rate(teacher.size_bytes, artifact.size_bytes),
        acceleration: acceleration(teacher_lat.mean_seconds, lat.mean_seconds),
        metric_name: headline_name(&sample.artifact.kind).into(),
        metric: metrics.primary,
        teacher_metric: teacher_metrics.primary,
        performance_delta_pp: (metrics.primary - teacher_metrics.primary) * 100.0,
        batch_size: BENCH_BATCH,
        warmup_runs: BENCH_WARMUPS,
        timed_runs: BENCH_RUNS,
        threads: 1,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{optimize, quantize_dynamic};
    use crate::model::{init_checkpoint, save_checkpoint, HeadKind, ModelConfig};
    use crate::synth;

    const MB: u64 = 1024 * 1024;

    #[test]
    fn published_multieurlex_ratios_are_reproduced() {
        // 1409 MB teacher vs 34 MB artifact, 99.3 s vs 0.8 s per 32-batch.
        let rate = compression_rate(1409 * MB, 34 * MB);
        assert!((rate - 41.4).abs() <= 0.1, "compression {rate}");
        let acc = acceleration(99.3, 0.8);
        assert!((acc - 124.1).abs() <= 0.1, "acceleration {acc}");
    }

    #[test]
    fn per_task_rates_average_to_the_headline_figures() {
        // Five tasks: teacher is 1409 MB everywhere; sizes and batch-32
        // times of the final compressed artifacts, and the teacher times per
        // task. Averaging the per-task quotients must land on the published
        // 50.9x / 169.8x headline pair.
        let artifact_mb = [34u64, 28, 25, 26, 27];
        let teacher_s = [99.3, 21.5, 116.0, 21.3, 45.6];
        let artifact_s = [0.8, 0.1, 0.8, 0.1, 0.3];
        let mean_rate = artifact_mb
            .iter()
            .map(|&a| compression_rate(1409 * MB, a * MB))
            .sum::<f64>()
            / 5.0;
        let mean_acc = teacher_s
            .iter()
            .zip(&artifact_s)
            .map(|(&t, &a)| acceleration(t, a))
            .sum::<f64>()
            / 5.0;
        assert!((mean_rate - 50.9).abs() <= 0.1, "mean compression {mean_rate}");
        assert!((mean_acc - 169.8).abs() <= 0.1, "mean acceleration {mean_acc}");
    }

    #[test]
    fn median_of_even_and_odd_runs() {
        assert_eq!(median(&[1.0, 2.0, 3.0]), 2.0);
        assert_eq!(median(&[1.0, 2.0, 3.0, 10.0]), 2.5);
    }

    fn sample_dataset(classes: usize, n: usize) -> EncodedDataset {
        let ds = synth::classification(13, n, classes).unwrap();
        let corpus: Vec<String> =
            ds.examples.iter().filter_map(|e| e.text.clone()).collect();
        let tok = crate::tokenizer::Tokenizer::train(&corpus, 80, 1).unwrap();
        ds.encode(&tok, 24).unwrap()
    }

    fn small_checkpoint(vocab: usize, classes: usize) -> crate::model::Checkpoint {
        let cfg = ModelConfig::uniform(vocab, 24, 32, 2, 2, 64, HeadKind::SingleLabel { classes })
            .unwrap();
        init_checkpoint(&cfg, 5).unwrap()
    }

    #[test]
    fn self_comparison_is_unity() {
        let dir = tempfile::tempdir().unwrap();
        let data = sample_dataset(3, 40);
        let ck = small_checkpoint(80, 3);
        let path = dir.path().join("model.gcmp");
        save_checkpoint(&ck, &path).unwrap();
        let report = efficiency_stats(&path, &path, SamplePair::shared(&data)).unwrap();
        assert_eq!(report.compression_rate, 1.0);
        assert_eq!(report.size_bytes, report.teacher_size_bytes);
        assert_eq!(report.param_count, report.teacher_param_count);
        // Same graph measured twice: identical predictions, near-identical
        // timing (noise only).
        assert_eq!(report.performance_delta_pp, 0.0);
        assert_eq!(report.metric, report.teacher_metric);
        assert!(report.acceleration > 0.5 && report.acceleration < 2.0, "{}", report.acceleration);
        assert_eq!(report.batch_size, 32);
        assert!(report.timed_runs >= 30);
        assert_eq!(report.threads, 1);
    }

    #[test]
    fn checkpoint_and_exported_graph_artifacts_agree() {
        let dir = tempfile::tempdir().unwrap();
        let ck = small_checkpoint(80, 3);
        let ck_path = dir.path().join("model.gcmp");
        save_checkpoint(&ck, &ck_path).unwrap();
        let g = export_graph(&ck).unwrap();
        let g_path = dir.path().join("model.graph.gcmp");
        g.save(&g_path).unwrap();

        let a = load_artifact(&ck_path).unwrap();
        let b = load_artifact(&g_path).unwrap();
        assert_eq!(a.param_count, ck.num_params() as u64);
        assert_eq!(a.param_count, b.param_count);
        assert_eq!(a.max_seq, 24);
        assert_eq!(b.max_seq, 24);
        assert!(a.size_bytes > 0 && b.size_bytes > 0);
    }

    #[test]
    fn quantization_shrinks_the_artifact_about_four_fold() {
        let dir = tempfile::tempdir().unwrap();
        // Shaped so the quantizable linear weights dominate the container;
        // embeddings, biases and layer-norm parameters stay f32, which keeps
        // the end-to-end ratio below the ideal 4x.
        let cfg =
            ModelConfig::uniform(80, 24, 64, 2, 2, 256, HeadKind::SingleLabel { classes: 3 })
                .unwrap();
        let ck = init_checkpoint(&cfg, 5).unwrap();
        let f32_path = dir.path().join("model.graph.gcmp");
        let q_path = dir.path().join("model.q.gcmp");
        let g = optimize(&export_graph(&ck).unwrap()).unwrap();
        g.save(&f32_path).unwrap();
        quantize_dynamic(&g).unwrap().save(&q_path).unwrap();

        let report = efficiency_stats(
            &q_path,
            &f32_path,
            SamplePair::shared(&sample_dataset(3, 40)),
        )
        .unwrap();
        assert!(
            report.compression_rate > 2.5 && report.compression_rate < 4.0,
            "rate {}",
            report.compression_rate
        );
        // Same parameters, different storage width.
        assert_eq!(report.param_count, report.teacher_param_count);
    }

    #[test]
    fn optimized_quantized_graph_is_faster_than_raw_f32_export() {
        // The headline latency claim: after fusion + int8 quantization the
        // graph must beat the plain f32 export on the standard 32-row batch,
        // measured with the full warmup/timed-runs protocol.
        let cfg =
            ModelConfig::uniform(96, 24, 64, 2, 2, 256, HeadKind::SingleLabel { classes: 3 })
                .unwrap();
        let ck = init_checkpoint(&cfg, 5).unwrap();
        let raw = export_graph(&ck).unwrap();
        let quantized = quantize_dynamic(&optimize(&raw).unwrap()).unwrap();
        let data = sample_dataset(3, 40);
        let wrap = |graph: GraphProgram| BenchArtifact {
            graph,
            size_bytes: 0,
            param_count: 0,
            max_seq: 24,
        };
        let t_raw = measure_latency(&wrap(raw), &data).unwrap();
        let t_q = measure_latency(&wrap(quantized), &data).unwrap();
        assert!(
            t_q.mean_seconds < t_raw.mean_seconds,
            "quantized {} vs raw {}",
            t_q.mean_seconds,
            t_raw.mean_seconds
        );
    }

    #[test]
    fn graph_predictions_match_checkpoint_evaluation() {
        let data = sample_dataset(3, 40);
        let ck = small_checkpoint(80, 3);
        let g = export_graph(&ck).unwrap();
        let from_graph = evaluate_graph(&g, &data, 8, 24).unwrap();
        let from_ck = crate::train::evaluate(&ck, &data, 8, 1).unwrap();
        assert_eq!(from_graph.primary, from_ck.metrics.primary);
        assert_eq!(from_graph.values, from_ck.metrics.values);
    }

    #[test]
    fn mismatched_samples_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let ck = small_checkpoint(80, 3);
        let path = dir.path().join("model.gcmp");
        save_checkpoint(&ck, &path).unwrap();
        let a = sample_dataset(3, 40);
        let b = sample_dataset(3, 12);
        let pair = SamplePair { artifact: &a, teacher: &b };
        assert!(efficiency_stats(&path, &path, pair).is_err());
    }
}
