use std::collections::BTreeMap;

use crate::{Tensor, TensorError};

/// AdamW hyper-parameters. Weight decay is decoupled: it is applied to the
/// parameter directly and never enters the moment estimates.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamW {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    pub weight_decay: f32,
}

impl Default for AdamW {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// First/second moment estimates for one parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Moments {
    pub m: Tensor<f32>,
    pub v: Tensor<f32>,
    /// Number of updates this parameter has received.
    pub step: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub hyper: AdamW,
    /// Number of optimizer calls.
    pub step: u64,
    pub moments: BTreeMap<String, Moments>,
    pub check_finite: bool,
}

impl OptimizerState {
    pub fn new(hyper: AdamW) -> Self {
        Self {
            hyper,
            step: 0,
            moments: BTreeMap::new(),
            check_finite: true,
        }
    }

    /// One bias-corrected AdamW update of every `(name, param, grad)` triple.
    pub fn adamw_step<'a, I>(&mut self, updates: I) -> Result<(), TensorError>
    where
        I: IntoIterator<Item = (&'a str, &'a mut Tensor<f32>, &'a Tensor<f32>)>,
    {
        let h = self.hyper;
        if !(h.lr > 0.0) {
            return Err(TensorError::Invalid(format!(
                "learning rate must be positive, got {}",
                h.lr
            )));
        }
        let updates: Vec<_> = updates.into_iter().collect();
        for (name, param, grad) in &updates {
            if param.shape() != grad.shape() {
                return Err(TensorError::ShapeMismatch {
                    op: "adamw",
                    lhs: param.shape().to_vec(),
                    rhs: grad.shape().to_vec(),
                });
            }
            if self.check_finite && !grad.is_finite() {
                return Err(TensorError::Invalid(format!(
                    "non-finite gradient for {name}"
                )));
            }
        }
        self.step += 1;
        for (name, param, grad) in updates {
            let mom = self.moments.entry(name.to_owned()).or_insert_with(|| Moments {
                m: Tensor::zeros(param.shape().to_vec()),
                v: Tensor::zeros(param.shape().to_vec()),
                step: 0,
            });
            if mom.m.shape() != param.shape() {
                return Err(TensorError::ShapeMismatch {
                    op: "adamw moments",
                    lhs: mom.m.shape().to_vec(),
                    rhs: param.shape().to_vec(),
                });
            }
            mom.step += 1;
            let bc1 = 1.0 - h.beta1.powi(mom.step as i32);
            let bc2 = 1.0 - h.beta2.powi(mom.step as i32);
            let decay = 1.0 - h.lr * h.weight_decay;
            let (m, v) = (mom.m.data_mut(), mom.v.data_mut());
            for (i, (p, &g)) in param.data_mut().iter_mut().zip(grad.data()).enumerate() {
                m[i] = h.beta1 * m[i] + (1.0 - h.beta1) * g;
                v[i] = h.beta2 * v[i] + (1.0 - h.beta2) * g * g;
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                *p *= decay;
                *p -= h.lr * m_hat / (v_hat.sqrt() + h.eps);
            }
        }
        Ok(())
    }
}
