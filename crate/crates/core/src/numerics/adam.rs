use serde::{Deserialize, Serialize};

use super::{NumericsError, ParamStore, Scalar};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment buffers for every tensor of one [`ParamStore`].
#[derive(Debug, Clone)]
pub struct AdamState<T> {
    pub config: AdamConfig,
    step: u64,
    first: Vec<Vec<T>>,
    second: Vec<Vec<T>>,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(params: &ParamStore<T>, config: AdamConfig) -> Self {
        let zeros = |_| -> Vec<Vec<T>> {
            params
                .iter()
                .map(|(_, _, t)| vec![T::zero(); t.len()])
                .collect()
        };
        Self {
            config,
            step: 0,
            first: zeros(()),
            second: zeros(()),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One bias-corrected Adam update from the accumulated gradients, which
    /// are cleared afterwards. Every parameter must carry a gradient.
    pub fn step(&mut self, params: &mut ParamStore<T>) -> Result<(), NumericsError> {
        if let Some((_, name, _)) = params.iter().find(|(_, _, t)| t.grad.is_none()) {
            return Err(NumericsError::MissingGradient {
                name: name.to_string(),
            });
        }
        if self.first.len() != params.len() {
            return Err(NumericsError::DataLength {
                expected: self.first.len(),
                got: params.len(),
            });
        }
        self.step += 1;
        let c = self.config;
        let (b1, b2) = (T::lit(c.beta1), T::lit(c.beta2));
        let t = self.step as i32;
        let bc1 = T::one() - b1.powi(t);
        let bc2 = T::one() - b2.powi(t);
        let (lr, eps) = (T::lit(c.lr), T::lit(c.eps));

        for (i, (_, tensor)) in params.tensors_mut().enumerate() {
            let grad = tensor.grad.take().expect("checked above");
            let (m, v) = (&mut self.first[i], &mut self.second[i]);
            for (k, w) in tensor.data_mut().iter_mut().enumerate() {
                let g = grad[k];
                m[k] = b1 * m[k] + (T::one() - b1) * g;
                v[k] = b2 * v[k] + (T::one() - b2) * g * g;
                let m_hat = m[k] / bc1;
                let v_hat = v[k] / bc2;
                *w = *w - lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}
