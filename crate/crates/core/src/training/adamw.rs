use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};
use crate::numerics::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled decay coefficient, applied only to parameters flagged for decay.
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 0.00015,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

impl AdamWConfig {
    pub fn validate(&self) -> Result<()> {
        const OP: &str = "adamw_config";
        ensure!(self.lr > 0.0, OP, "lr must be positive");
        ensure!(
            (0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2),
            OP,
            "betas must lie in [0, 1)"
        );
        ensure!(self.eps > 0.0, OP, "eps must be positive");
        ensure!(
            self.weight_decay >= 0.0,
            OP,
            "weight_decay must be non-negative"
        );
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamWState {
    pub config: AdamWConfig,
    pub step_count: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamWState {
    /// Zeroed moment buffers shaped like `params`.
    pub fn new(config: AdamWConfig, params: &[Tensor]) -> Result<Self> {
        config.validate()?;
        let zeros: Vec<Vec<f64>> = params.iter().map(|p| vec![0.0; p.numel()]).collect();
        Ok(Self {
            config,
            step_count: 0,
            m: zeros.clone(),
            v: zeros,
        })
    }

    pub fn first_moments(&self) -> &[Vec<f64>] {
        &self.m
    }

    pub fn second_moments(&self) -> &[Vec<f64>] {
        &self.v
    }

    /// One bias-corrected AdamW update in place. `decay[i]` selects whether
    /// parameter `i` receives decoupled weight decay.
    pub fn step(&mut self, params: &mut [Tensor], grads: &[Tensor], decay: &[bool]) -> Result<()> {
        const OP: &str = "adamw_step";
        ensure!(
            params.len() == self.m.len()
                && grads.len() == params.len()
                && decay.len() == params.len(),
            OP,
            "expected {} params, grads and decay flags; got {}, {}, {}",
            self.m.len(),
            params.len(),
            grads.len(),
            decay.len()
        );
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            ensure!(
                p.shape() == g.shape(),
                OP,
                "gradient {i} has shape {:?}, param {:?}",
                g.shape(),
                p.shape()
            );
            ensure!(
                p.numel() == self.m[i].len(),
                OP,
                "param {i} changed size since initialization"
            );
        }
        self.step_count += 1;
        let c = &self.config;
        let t = self.step_count as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        for (i, p) in params.iter_mut().enumerate() {
            let wd = if decay[i] { c.weight_decay } else { 0.0 };
            let g = grads[i].data();
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            let mut out = p.to_vec();
            for j in 0..out.len() {
                m[j] = c.beta1 * m[j] + (1.0 - c.beta1) * g[j];
                v[j] = c.beta2 * v[j] + (1.0 - c.beta2) * g[j] * g[j];
                let m_hat = m[j] / bc1;
                let v_hat = v[j] / bc2;
                out[j] -= c.lr * (m_hat / (v_hat.sqrt() + c.eps) + wd * out[j]);
            }
            *p = Tensor::new(p.shape(), out)?;
        }
        Ok(())
    }
}
