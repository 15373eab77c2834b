//! Adaptive moment estimation over candle variables.

use candle_core::{backprop::GradStore, Result, Tensor, Var};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-7,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> std::result::Result<(), String> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(format!("learning_rate must be positive, got {}", self.learning_rate));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(b > 0.0 && b < 1.0) {
                return Err(format!("{name} must lie in (0, 1), got {b}"));
            }
        }
        if !(self.epsilon > 0.0) {
            return Err(format!("epsilon must be positive, got {}", self.epsilon));
        }
        Ok(())
    }
}

struct Moments {
    var: Var,
    m: Tensor,
    v: Tensor,
}

/// Bias-corrected Adam: `theta -= lr * m_hat / (sqrt(v_hat) + eps)`.
pub struct Adam {
    config: OptimizerConfig,
    params: Vec<Moments>,
    step: u64,
}

impl Adam {
    pub fn new(vars: Vec<Var>, config: OptimizerConfig) -> Result<Self> {
        let params = vars
            .into_iter()
            .map(|var| {
                let zeros = var.as_tensor().zeros_like()?;
                Ok(Moments {
                    m: zeros.clone(),
                    v: zeros,
                    var,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            config,
            params,
            step: 0,
        })
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one update; parameters without a gradient are left untouched.
    pub fn step(&mut self, grads: &GradStore) -> Result<()> {
        self.step += 1;
        let c = self.config;
        let t = self.step as i32;
        let m_corr = 1.0 / (1.0 - c.beta1.powi(t));
        let v_corr = 1.0 / (1.0 - c.beta2.powi(t));
        for p in &mut self.params {
            let Some(g) = grads.get(p.var.as_tensor()) else {
                continue;
            };
            // Detached so the moments never keep the forward graph alive.
            let g = g.detach();
            p.m = ((&p.m * c.beta1)? + (&g * (1.0 - c.beta1))?)?.detach();
            p.v = ((&p.v * c.beta2)? + (g.sqr()? * (1.0 - c.beta2))?)?.detach();
            let m_hat = (&p.m * m_corr)?;
            let v_hat = (&p.v * v_corr)?;
            let update = (m_hat / (v_hat.sqrt()? + c.epsilon)?)?;
            p.var.set(&(p.var.as_tensor().detach() - (update * c.learning_rate)?)?)?;
        }
        Ok(())
    }
}
