//! AdamW optimizer with decoupled weight decay and bias correction.

use std::collections::BTreeMap;

use super::Var;
use crate::error::{GcError, Result};

pub struct AdamW {
    beta1: f32,
    beta2: f32,
    eps: f32,
    weight_decay: f32,
    step_count: u64,
    // first/second moment estimates keyed by parameter name
    moments: BTreeMap<String, (Vec<f32>, Vec<f32>)>,
}

impl AdamW {
    pub fn new(weight_decay: f32) -> AdamW {
        AdamW {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step_count: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    /// Apply one update. Parameters without a gradient are treated as having
    /// zero gradient. Non-finite gradients are an error and leave every
    /// parameter untouched.
    pub fn step(&mut self, params: &[(String, Var)], lr: f32) -> Result<()> {
        if !lr.is_finite() || lr < 0.0 {
            return Err(GcError::InvalidConfig(format!("learning rate {lr}")));
        }
        for (name, p) in params {
            if let Some(g) = p.grad() {
                if g.data().iter().any(|x| !x.is_finite()) {
                    return Err(GcError::NonFinite("gradient"));
                }
                if g.shape() != p.shape() {
                    return Err(GcError::ShapeMismatch {
                        op: "adamw",
                        detail: format!("{name}: grad {:?} vs param {:?}", g.shape(), p.shape()),
                    });
                }
            }
        }
        self.step_count += 1;
        let t = self.step_count as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (name, p) in params {
            let n = p.with_value(|v| v.numel());
            let (m, v) = self
                .moments
                .entry(name.clone())
                .or_insert_with(|| (vec![0.0; n], vec![0.0; n]));
            if m.len() != n {
                return Err(GcError::ShapeMismatch {
                    op: "adamw",
                    detail: format!("{name}: optimizer state has {} elements, param {n}", m.len()),
                });
            }
            let grad = p.grad();
            let zeros;
            let g: &[f32] = match &grad {
                Some(g) => g.data(),
                None => {
                    zeros = vec![0.0f32; n];
                    &zeros
                }
            };
            p.with_value_mut(|pv| {
                for (i, x) in pv.data_mut().iter_mut().enumerate() {
                    m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                    v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                    let mhat = m[i] / bc1;
                    let vhat = v[i] / bc2;
                    // decoupled weight decay: applied directly to the weight,
                    // not mixed into the moment estimates
                    *x -= lr * (mhat / (vhat.sqrt() + self.eps) + self.weight_decay * *x);
                }
            });
        }
        Ok(())
    }
}

/// Clear gradients on every parameter (call between steps).
pub fn zero_grads(params: &[(String, Var)]) {
    for (_, p) in params {
        p.zero_grad();
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn params(vals: &[f32]) -> Vec<(String, Var)> {
        vec![("w".into(), Var::param(Tensor::new(vec![vals.len()], vals.to_vec()).unwrap()))]
    }

    #[test]
    fn zero_grad_and_no_decay_leaves_params_unchanged() {
        let ps = params(&[1.0, -2.0, 3.0]);
        let mut opt = AdamW::new(0.0);
        for _ in 0..5 {
            opt.step(&ps, 0.1).unwrap();
        }
        assert_eq!(ps[0].1.value().data(), &[1.0, -2.0, 3.0]);
    }

    #[test]
    fn first_step_matches_hand_computation() {
        // With g constant: m = (1-b1) g, v = (1-b2) g^2; after bias correction
        // mhat = g, vhat = g^2, so the update is -lr * g/(|g| + eps) = -lr*sign(g).
        let ps = params(&[1.0, 1.0]);
        ps[0].1.accumulate_grad(&Tensor::new(vec![2], vec![0.5, -3.0]).unwrap());
        let mut opt = AdamW::new(0.0);
        opt.step(&ps, 0.01).unwrap();
        let v = ps[0].1.value();
        assert!((v.data()[0] - 0.99).abs() < 1e-5);
        assert!((v.data()[1] - 1.01).abs() < 1e-5);
    }

    #[test]
    fn weight_decay_is_decoupled() {
        // zero gradient, wd > 0: pure multiplicative shrink by (1 - lr*wd)
        let ps = params(&[2.0]);
        let mut opt = AdamW::new(0.01);
        opt.step(&ps, 0.1).unwrap();
        assert!((ps[0].1.value().item() - 2.0 * (1.0 - 0.1 * 0.01)).abs() < 1e-7);
    }

    #[test]
    fn non_finite_gradient_is_an_error() {
        let ps = params(&[1.0]);
        ps[0].1.accumulate_grad(&Tensor::new(vec![1], vec![f32::NAN]).unwrap());
        let mut opt = AdamW::new(0.0);
        assert!(matches!(opt.step(&ps, 0.1), Err(GcError::NonFinite(_))));
        // parameter untouched
        assert_eq!(ps[0].1.value().item(), 1.0);
    }
}
