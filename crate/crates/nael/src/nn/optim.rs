//! Adam optimizer with bias correction.

use std::collections::HashMap;

use crate::error::{NaelError, Result};
use crate::nn::tensor::{Param, Tensor};

#[derive(Debug, Clone)]
pub struct AdamState {
    pub step: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// First/second moments keyed by parameter name, allocated lazily.
    moments: HashMap<String, (Tensor, Tensor)>,
}

impl AdamState {
    pub fn new(lr: f64) -> AdamState {
        AdamState {
            step: 0,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            moments: HashMap::new(),
        }
    }

    /// Advance the shared step counter; call once per optimizer step,
    /// before updating the parameters of that step.
    pub fn begin_step(&mut self) {
        self.step += 1;
    }

    /// Apply the Adam update to one named parameter using its accumulated
    /// gradient. `begin_step` must have been called at least once.
    pub fn update(&mut self, name: &str, param: &mut Param) -> Result<()> {
        if self.step == 0 {
            return Err(NaelError::State("adam update before begin_step".into()));
        }
        if !param.value.same_shape(&param.grad) {
            return Err(NaelError::Shape(format!(
                "adam: value {:?} vs grad {:?} for '{name}'",
                param.value.shape, param.grad.shape
            )));
        }
        let (m, v) = self
            .moments
            .entry(name.to_string())
            .or_insert_with(|| (Tensor::zeros(&param.value.shape), Tensor::zeros(&param.value.shape)));
        if !m.same_shape(&param.value) {
            return Err(NaelError::Shape(format!(
                "adam: moment shape {:?} vs value {:?} for '{name}'",
                m.shape, param.value.shape
            )));
        }
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for i in 0..param.value.data.len() {
            let g = param.grad.data[i];
            m.data[i] = self.beta1 * m.data[i] + (1.0 - self.beta1) * g;
            v.data[i] = self.beta2 * v.data[i] + (1.0 - self.beta2) * g * g;
            let m_hat = m.data[i] / bc1;
            let v_hat = v.data[i] / bc2;
            param.value.data[i] -= self.lr * m_hat / (v_hat.sqrt() + self.epsilon);
        }
        Ok(())
    }
}

/// Convenience wrapper: one full Adam step over a set of named parameters.
pub fn adam_step(params: &mut [(&str, &mut Param)], state: &mut AdamState) -> Result<()> {
    state.begin_step();
    for (name, param) in params.iter_mut() {
        state.update(name, param)?;
    }
    Ok(())
}
