use serde::{Deserialize, Serialize};

use super::{Gradients, VelocityNet};
use crate::error::{CgfmError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
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

/// Adam moments shaped like the network parameters.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub config: AdamConfig,
    first: Gradients,
    second: Gradients,
    step: u64,
}

impl AdamState {
    pub fn new(net: &VelocityNet, config: AdamConfig) -> Self {
        Self {
            config,
            first: Gradients::zeros_like(net),
            second: Gradients::zeros_like(net),
            step: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One bias-corrected Adam step. A non-finite gradient rejects the whole
    /// update and leaves both the parameters and the state untouched.
    pub fn update(&mut self, net: &mut VelocityNet, grads: &Gradients) -> Result<()> {
        for (i, g) in grads.layers.iter().enumerate() {
            if !g.weight.iter().all(|v| v.is_finite()) {
                return Err(CgfmError::NonFiniteGradient {
                    param: VelocityNet::param_name(i, false),
                });
            }
            if !g.bias.iter().all(|v| v.is_finite()) {
                return Err(CgfmError::NonFiniteGradient {
                    param: VelocityNet::param_name(i, true),
                });
            }
        }
        self.step += 1;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
        } = self.config;
        let c1 = 1.0 - beta1.powi(self.step as i32);
        let c2 = 1.0 - beta2.powi(self.step as i32);
        let apply = |p: &mut f64, m: &mut f64, v: &mut f64, g: f64| {
            *m = beta1 * *m + (1.0 - beta1) * g;
            *v = beta2 * *v + (1.0 - beta2) * g * g;
            let m_hat = *m / c1;
            let v_hat = *v / c2;
            *p -= lr * m_hat / (v_hat.sqrt() + eps);
        };
        let layers = net.layers_mut();
        for (i, g) in grads.layers.iter().enumerate() {
            let (m, v) = (&mut self.first.layers[i], &mut self.second.layers[i]);
            let l = &mut layers[i];
            for (((p, m), v), &g) in l
                .weight
                .iter_mut()
                .zip(m.weight.iter_mut())
                .zip(v.weight.iter_mut())
                .zip(g.weight.iter())
            {
                apply(p, m, v, g);
            }
            for (((p, m), v), &g) in l
                .bias
                .iter_mut()
                .zip(m.bias.iter_mut())
                .zip(v.bias.iter_mut())
                .zip(g.bias.iter())
            {
                apply(p, m, v, g);
            }
        }
        Ok(())
    }
}
