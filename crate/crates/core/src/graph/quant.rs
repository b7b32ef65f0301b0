//! Post-training dynamic int8 quantization.
//!
//! Weights: per-row symmetric, `scale_r = max|row| / 127`, so dequantization
//! is `scale_r * q` with no zero point and negation stays representable.
//! Activations are quantized per tensor at execution time (asymmetric, from
//! the batch's observed min/max); that half lives in the executor.

use crate::error::{GcError, Result};
use crate::tensor::Tensor;

use super::{Constant, GraphProgram, OpKind};

#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedTensor {
    pub shape: Vec<usize>,
    /// Row-major int8 values in `[-127, 127]`.
    pub values: Vec<i8>,
    /// One scale per leading-dimension row.
    pub scales: Vec<f32>,
}

impl QuantizedTensor {
    /// Per-row symmetric quantization of a 2-D matrix. An all-zero row gets
    /// scale 1 so its zeros reconstruct exactly.
    pub fn from_rows(t: &Tensor) -> Result<QuantizedTensor> {
        if t.rank() != 2 {
            return Err(GcError::InvalidInput(format!(
                "per-row quantization needs a 2-D matrix, got {:?}",
                t.shape()
            )));
        }
        let (rows, cols) = (t.shape()[0], t.shape()[1]);
        let mut values = Vec::with_capacity(rows * cols);
        let mut scales = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = &t.data()[r * cols..(r + 1) * cols];
            let max_abs = row.iter().fold(0.0f32, |m, v| m.max(v.abs()));
            let scale = if max_abs == 0.0 { 1.0 } else { max_abs / 127.0 };
            scales.push(scale);
            values.extend(row.iter().map(|&v| (v / scale).round().clamp(-127.0, 127.0) as i8));
        }
        Ok(QuantizedTensor { shape: vec![rows, cols], values, scales })
    }

    pub fn dequantize(&self) -> Tensor {
        let cols = self.shape[1];
        let data = self
            .values
            .iter()
            .enumerate()
            .map(|(i, &q)| q as f32 * self.scales[i / cols])
            .collect();
        Tensor::new(self.shape.clone(), data).expect("shape matched values at construction")
    }

    pub fn row(&self, r: usize) -> &[i8] {
        let cols = self.shape[1];
        &self.values[r * cols..(r + 1) * cols]
    }
}

/// Replace every `linear` / `linear_gelu` weight with a per-row int8
/// initializer and swap the node to its quantized form. A weight shared
/// with any non-linear consumer (for example a token embedding doubling as
/// a tied decoder matrix) stays f32 — the gather path needs the original.
pub fn quantize_dynamic(g: &GraphProgram) -> Result<GraphProgram> {
    let mut out = g.clone();
    for node in &mut out.nodes {
        let fused = match node.op {
            OpKind::Linear => OpKind::QLinear,
            OpKind::LinearGelu => OpKind::QLinearGelu,
            _ => continue,
        };
        let weight_id = node.inputs[1].clone();
        let only_linear_consumers = g.nodes.iter().all(|n| {
            n.inputs.iter().enumerate().all(|(slot, input)| {
                *input != weight_id
                    || (slot == 1 && matches!(n.op, OpKind::Linear | OpKind::LinearGelu))
            })
        }) && !g.outputs.contains(&weight_id);
        if !only_linear_consumers {
            continue;
        }
        if let Some(Constant::F32(w)) = g.initializers.get(&weight_id) {
            if !matches!(out.initializers.get(&weight_id), Some(Constant::I8(_))) {
                out.initializers
                    .insert(weight_id.clone(), Constant::I8(QuantizedTensor::from_rows(w)?));
            }
            node.op = fused;
        }
    }
    out.validate()?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
        let data: Vec<f32> = (0..rows * cols).map(|_| rng.gen_range(-3.0..3.0)).collect();
        Tensor::new(vec![rows, cols], data).unwrap()
    }

    #[test]
    fn zero_matrix_reconstructs_exactly() {
        let t = Tensor::zeros(&[4, 8]);
        let q = QuantizedTensor::from_rows(&t).unwrap();
        assert!(q.values.iter().all(|&v| v == 0));
        assert!(q.scales.iter().all(|&s| s == 1.0));
        assert_eq!(q.dequantize().data(), t.data());
    }

    #[test]
    fn reconstruction_error_bounded_by_half_scale() {
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        for _ in 0..20 {
            let t = random_matrix(&mut rng, 64, 64);
            let q = QuantizedTensor::from_rows(&t).unwrap();
            let back = q.dequantize();
            for r in 0..64 {
                let bound = q.scales[r] / 2.0 + 1e-7;
                for c in 0..64 {
                    let err = (t.data()[r * 64 + c] - back.data()[r * 64 + c]).abs();
                    assert!(err <= bound, "row {r}: err {err} > scale/2 {bound}");
                }
            }
        }
    }

    #[test]
    fn values_stay_in_symmetric_range() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let t = random_matrix(&mut rng, 16, 32);
        let q = QuantizedTensor::from_rows(&t).unwrap();
        assert!(q.values.iter().all(|&v| (-127..=127).contains(&(v as i32))));
        // each row's extreme hits +-127 exactly (scale is max|row|/127)
        for r in 0..16 {
            assert_eq!(q.row(r).iter().map(|v| v.unsigned_abs()).max().unwrap(), 127);
        }
    }
}
