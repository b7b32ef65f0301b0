//! Loss functions. All return a single-element `Var` ready for `backward`.

use super::{Tape, Tensor, Var};
use crate::error::{GcError, Result};

const LOG_CLAMP: f32 = 1e-12;

impl Tape {
    /// Cross-entropy over rows of `logits` (N x C) against class indices.
    /// `weights` (length N) rescales per-row losses and is normalized by its
    /// sum, so zero-weighted rows (e.g. unmasked MLM positions or padding)
    /// contribute neither loss nor gradient.
    pub fn cross_entropy(
        &self,
        logits: &Var,
        targets: &[usize],
        weights: Option<&[f32]>,
    ) -> Result<Var> {
        let shape = logits.shape();
        if shape.len() != 2 {
            return Err(GcError::ShapeMismatch {
                op: "cross_entropy",
                detail: format!("logits must be 2-D, got {:?}", shape),
            });
        }
        let (n, c) = (shape[0], shape[1]);
        if targets.len() != n {
            return Err(GcError::ShapeMismatch {
                op: "cross_entropy",
                detail: format!("{} targets for {} rows", targets.len(), n),
            });
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= c) {
            return Err(GcError::InvalidInput(format!("target class {bad} out of range ({c})")));
        }
        let w: Vec<f32> = match weights {
            Some(w) => {
                if w.len() != n {
                    return Err(GcError::ShapeMismatch {
                        op: "cross_entropy",
                        detail: format!("{} weights for {} rows", w.len(), n),
                    });
                }
                if w.iter().any(|&x| x < 0.0 || !x.is_finite()) {
                    return Err(GcError::InvalidInput("loss weights must be finite and >= 0".into()));
                }
                w.to_vec()
            }
            None => vec![1.0; n],
        };
        let wsum: f32 = w.iter().sum();
        if wsum <= 0.0 {
            return Err(GcError::InvalidInput("loss weights sum to zero".into()));
        }
        let loss = logits.with_value(|lv| {
            let mut total = 0.0f64;
            for (i, row) in lv.data().chunks(c).enumerate() {
                if w[i] == 0.0 {
                    continue;
                }
                let max = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
                let lse = max + row.iter().map(|&x| (x - max).exp()).sum::<f32>().ln();
                total += (w[i] * (lse - row[targets[i]])) as f64;
            }
            (total / wsum as f64) as f32
        });
        let out = Var::new(Tensor::scalar(loss), self.is_recording() && logits.requires_grad());
        out.with_value(|v| v.ensure_finite("cross_entropy"))?;
        let (logits2, o) = (logits.clone(), out.clone());
        let targets = targets.to_vec();
        self.record(&out, move || {
            let gs = match o.with_grad(|g| g.map(Tensor::item)) {
                Some(g) => g,
                None => return,
            };
            let contrib = logits2.with_value(|lv| {
                let mut grad = Tensor::zeros(lv.shape());
                for (i, row) in lv.data().chunks(c).enumerate() {
                    if w[i] == 0.0 {
                        continue;
                    }
                    let max = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
                    let denom: f32 = row.iter().map(|&x| (x - max).exp()).sum();
                    let scale = gs * w[i] / wsum;
                    let grow = &mut grad.data_mut()[i * c..(i + 1) * c];
                    for j in 0..c {
                        let p = (row[j] - max).exp() / denom;
                        grow[j] = scale * (p - if j == targets[i] { 1.0 } else { 0.0 });
                    }
                }
                grad
            });
            logits2.accumulate_grad(&contrib);
        });
        Ok(out)
    }

    /// Binary cross-entropy on logits, averaged over every element. Targets
    /// may be soft (any value in [0, 1]). Uses the stable formulation
    /// `max(x,0) - x*y + ln(1 + e^-|x|)`.
    pub fn bce_with_logits(&self, logits: &Var, targets: &Tensor) -> Result<Var> {
        if logits.shape() != targets.shape() {
            return Err(GcError::ShapeMismatch {
                op: "bce_with_logits",
                detail: format!("logits {:?} vs targets {:?}", logits.shape(), targets.shape()),
            });
        }
        if targets.data().iter().any(|&y| !(0.0..=1.0).contains(&y)) {
            return Err(GcError::InvalidInput("bce targets must lie in [0, 1]".into()));
        }
        let n = targets.numel() as f32;
        let loss = logits.with_value(|lv| {
            let mut total = 0.0f64;
            for (&x, &y) in lv.data().iter().zip(targets.data()) {
                total += (x.max(0.0) - x * y + (-x.abs()).exp().ln_1p()) as f64;
            }
            (total / n as f64) as f32
        });
        let out = Var::new(Tensor::scalar(loss), self.is_recording() && logits.requires_grad());
        out.with_value(|v| v.ensure_finite("bce_with_logits"))?;
        let (logits2, o) = (logits.clone(), out.clone());
        let targets = targets.clone();
        self.record(&out, move || {
            let gs = match o.with_grad(|g| g.map(Tensor::item)) {
                Some(g) => g,
                None => return,
            };
            let contrib = logits2.with_value(|lv| {
                let mut grad = Tensor::zeros(lv.shape());
                for (gi, (&x, &y)) in grad.data_mut().iter_mut().zip(lv.data().iter().zip(targets.data())) {
                    let sig = 1.0 / (1.0 + (-x).exp());
                    *gi = gs * (sig - y) / n;
                }
                grad
            });
            logits2.accumulate_grad(&contrib);
        });
        Ok(out)
    }

    /// Mean squared error against a constant target tensor.
    pub fn mse(&self, pred: &Var, target: &Tensor) -> Result<Var> {
        if pred.shape() != target.shape() {
            return Err(GcError::ShapeMismatch {
                op: "mse",
                detail: format!("pred {:?} vs target {:?}", pred.shape(), target.shape()),
            });
        }
        let n = target.numel() as f32;
        let loss = pred.with_value(|pv| {
            pv.data()
                .iter()
                .zip(target.data())
                .map(|(&p, &t)| ((p - t) * (p - t)) as f64)
                .sum::<f64>() as f32
                / n
        });
        let out = Var::new(Tensor::scalar(loss), self.is_recording() && pred.requires_grad());
        out.with_value(|v| v.ensure_finite("mse"))?;
        let (pred2, o) = (pred.clone(), out.clone());
        let target = target.clone();
        self.record(&out, move || {
            let gs = match o.with_grad(|g| g.map(Tensor::item)) {
                Some(g) => g,
                None => return,
            };
            let contrib = pred2.with_value(|pv| {
                let mut grad = Tensor::zeros(pv.shape());
                for (gi, (&p, &t)) in grad.data_mut().iter_mut().zip(pv.data().iter().zip(target.data())) {
                    *gi = gs * 2.0 * (p - t) / n;
                }
                grad
            });
            pred2.accumulate_grad(&contrib);
        });
        Ok(out)
    }

    /// KL divergence `KL(p || q)` where both arguments are probability
    /// distributions over the last dimension, averaged over rows. Both sides
    /// are differentiable; logs are clamped at 1e-12. Rows must sum to 1.
    pub fn kl_div(&self, p: &Var, q: &Var) -> Result<Var> {
        let shape = p.shape();
        if shape != q.shape() || shape.is_empty() {
            return Err(GcError::ShapeMismatch {
                op: "kl_div",
                detail: format!("p {:?} vs q {:?}", shape, q.shape()),
            });
        }
        let c = *shape.last().unwrap();
        let rows = shape.iter().product::<usize>() / c;
        let check = |v: &Var, name: &str| -> Result<()> {
            v.with_value(|t| {
                if t.data().iter().any(|&x| x < -1e-6 || !x.is_finite()) {
                    return Err(GcError::InvalidInput(format!("{name} is not a distribution (negative entries)")));
                }
                for row in t.data().chunks(c) {
                    let s: f32 = row.iter().sum();
                    if (s - 1.0).abs() > 1e-4 {
                        return Err(GcError::InvalidInput(format!(
                            "{name} rows must sum to 1 (got {s})"
                        )));
                    }
                }
                Ok(())
            })
        };
        check(p, "kl_div p")?;
        check(q, "kl_div q")?;
        let loss = p.with_value(|pv| {
            q.with_value(|qv| {
                let mut total = 0.0f64;
                for (&pi, &qi) in pv.data().iter().zip(qv.data()) {
                    if pi > 0.0 {
                        total += (pi * (pi.max(LOG_CLAMP).ln() - qi.max(LOG_CLAMP).ln())) as f64;
                    }
                }
                (total / rows as f64) as f32
            })
        });
        let out =
            Var::new(Tensor::scalar(loss), self.is_recording() && (p.requires_grad() || q.requires_grad()));
        out.with_value(|v| v.ensure_finite("kl_div"))?;
        let (p2, q2, o) = (p.clone(), q.clone(), out.clone());
        self.record(&out, move || {
            let gs = match o.with_grad(|g| g.map(Tensor::item)) {
                Some(g) => g,
                None => return,
            };
            let r = rows as f32;
            if p2.requires_grad() {
                let contrib = p2.with_value(|pv| {
                    q2.with_value(|qv| {
                        let mut grad = Tensor::zeros(pv.shape());
                        for (gi, (&pi, &qi)) in
                            grad.data_mut().iter_mut().zip(pv.data().iter().zip(qv.data()))
                        {
                            *gi = gs * (pi.max(LOG_CLAMP).ln() - qi.max(LOG_CLAMP).ln() + 1.0) / r;
                        }
                        grad
                    })
                });
                p2.accumulate_grad(&contrib);
            }
            if q2.requires_grad() {
                let contrib = p2.with_value(|pv| {
                    q2.with_value(|qv| {
                        let mut grad = Tensor::zeros(qv.shape());
                        for (gi, (&pi, &qi)) in
                            grad.data_mut().iter_mut().zip(pv.data().iter().zip(qv.data()))
                        {
                            *gi = gs * (-pi / qi.max(LOG_CLAMP)) / r;
                        }
                        grad
                    })
                });
                q2.accumulate_grad(&contrib);
            }
        });
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cross_entropy_uniform_logits() {
        // equal logits over C classes -> loss = ln C
        let t = Tape::new();
        let logits = Var::param(Tensor::zeros(&[2, 4]));
        let loss = t.cross_entropy(&logits, &[0, 3], None).unwrap();
        assert!((loss.item() - 4.0f32.ln()).abs() < 1e-6);
        t.backward(&loss).unwrap();
        let g = logits.grad().unwrap();
        // gradient: (p - onehot)/N with p = 1/4
        assert!((g.data()[0] - (0.25 - 1.0) / 2.0).abs() < 1e-6);
        assert!((g.data()[1] - 0.25 / 2.0).abs() < 1e-6);
    }

    #[test]
    fn cross_entropy_zero_weight_rows_are_inert() {
        let t = Tape::new();
        let logits = Var::param(
            Tensor::new(vec![2, 3], vec![5.0, -1.0, 0.3, 100.0, -50.0, 3.0]).unwrap(),
        );
        let loss = t.cross_entropy(&logits, &[1, 0], Some(&[1.0, 0.0])).unwrap();
        t.backward(&loss).unwrap();
        let g = logits.grad().unwrap();
        assert!(g.data()[3..].iter().all(|&x| x == 0.0));
        assert!(g.data()[..3].iter().any(|&x| x != 0.0));
    }

    #[test]
    fn bce_matches_hand_value() {
        // x = 0, y = 0.5 -> loss = ln 2
        let t = Tape::inference();
        let logits = Var::param(Tensor::zeros(&[1, 1]));
        let loss = t.bce_with_logits(&logits, &Tensor::full(&[1, 1], 0.5)).unwrap();
        assert!((loss.item() - 2.0f32.ln()).abs() < 1e-6);
    }

    #[test]
    fn bce_stable_for_large_logits() {
        let t = Tape::new();
        let logits = Var::param(Tensor::new(vec![1, 2], vec![80.0, -80.0]).unwrap());
        let loss = t.bce_with_logits(&logits, &Tensor::new(vec![1, 2], vec![1.0, 0.0]).unwrap()).unwrap();
        assert!(loss.item().is_finite());
        assert!(loss.item() < 1e-6);
        t.backward(&loss).unwrap();
        assert!(logits.grad().unwrap().data().iter().all(|x| x.is_finite()));
    }

    #[test]
    fn mse_hand_value() {
        let t = Tape::new();
        let pred = Var::param(Tensor::new(vec![2], vec![1.0, 3.0]).unwrap());
        let loss = t.mse(&pred, &Tensor::new(vec![2], vec![0.0, 1.0]).unwrap()).unwrap();
        assert!((loss.item() - 2.5).abs() < 1e-6);
        t.backward(&loss).unwrap();
        assert_eq!(pred.grad().unwrap().data(), &[1.0, 2.0]);
    }

    #[test]
    fn kl_frozen_reference_value() {
        // KL(softmax([2,0]) || softmax([0,0])) = 0.327810 (hand computed:
        // p = [0.880797, 0.119203], q = [0.5, 0.5],
        // sum p_i (ln p_i - ln q_i) = 0.3278104)
        let t = Tape::inference();
        let p = Var::constant(Tensor::new(vec![1, 2], vec![0.880_797, 0.119_203]).unwrap());
        let q = Var::constant(Tensor::new(vec![1, 2], vec![0.5, 0.5]).unwrap());
        let loss = t.kl_div(&p, &q).unwrap();
        assert!((loss.item() - 0.327_810_4).abs() < 1e-5);
    }

    #[test]
    fn kl_rejects_non_distributions() {
        let t = Tape::new();
        let p = Var::constant(Tensor::new(vec![1, 2], vec![0.7, 0.7]).unwrap());
        let q = Var::constant(Tensor::new(vec![1, 2], vec![0.5, 0.5]).unwrap());
        assert!(t.kl_div(&p, &q).is_err());
        let neg = Var::constant(Tensor::new(vec![1, 2], vec![-0.5, 1.5]).unwrap());
        assert!(t.kl_div(&neg, &q).is_err());
    }

    #[test]
    fn kl_zero_when_equal() {
        let t = Tape::new();
        let p = Var::param(Tensor::new(vec![2, 2], vec![0.3, 0.7, 0.9, 0.1]).unwrap());
        let q = Var::param(Tensor::new(vec![2, 2], vec![0.3, 0.7, 0.9, 0.1]).unwrap());
        let loss = t.kl_div(&p, &q).unwrap();
        assert!(loss.item().abs() < 1e-7);
    }
}
