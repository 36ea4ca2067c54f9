use crate::bayes_mlp::{GaussianParamSet, Gradients};
use crate::error::{Error, Result};

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPSILON: f64 = 1e-8;

/// First and second moment estimates for one flat parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamMoments {
    m: Vec<f64>,
    v: Vec<f64>,
    step: u32,
}

impl AdamMoments {
    pub fn new(len: usize) -> Self {
        AdamMoments {
            m: vec![0.0; len],
            v: vec![0.0; len],
            step: 0,
        }
    }

    pub fn steps(&self) -> u32 {
        self.step
    }

    /// One bias-corrected Adam update of `params` in place.
    pub fn step(&mut self, params: &mut [f64], grads: &[f64], lr: f64) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::Internal(format!(
                "adam moments hold {} entries, got {} parameters and {} gradients",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        self.step += 1;
        let c1 = 1.0 - BETA1.powi(self.step as i32);
        let c2 = 1.0 - BETA2.powi(self.step as i32);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = BETA1 * self.m[i] + (1.0 - BETA1) * g;
            self.v[i] = BETA2 * self.v[i] + (1.0 - BETA2) * g * g;
            let m_hat = self.m[i] / c1;
            let v_hat = self.v[i] / c2;
            params[i] -= lr * m_hat / (v_hat.sqrt() + EPSILON);
        }
        Ok(())
    }
}

/// Adam state for a network's means and log-variances.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    mu: AdamMoments,
    log_var: AdamMoments,
}

impl Adam {
    pub fn new(n_params: usize) -> Self {
        Adam {
            mu: AdamMoments::new(n_params),
            log_var: AdamMoments::new(n_params),
        }
    }

    pub fn step(&mut self, params: &mut GaussianParamSet, grads: &Gradients, lr: f64) -> Result<()> {
        self.mu.step(&mut params.mu, &grads.d_mu, lr)?;
        self.log_var.step(&mut params.log_var, &grads.d_log_var, lr)
    }
}
