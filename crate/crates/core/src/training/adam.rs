use secotrans_tensor::{Float, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{contract, Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// L2 penalty added to the gradient.
    pub weight_decay: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig { learning_rate: 1e-4, beta1: 0.5, beta2: 0.999, eps: 1e-8, weight_decay: 0.0 }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |k: &str, r: &str| Err(Error::Config { key: format!("optimizer.{k}"), reason: r.into() });
        // zero is allowed: a frozen run is occasionally useful and is a documented no-op
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate", "must be finite and >= 0");
        }
        if !(0.0..1.0).contains(&self.beta1) {
            return bad("beta1", "must lie in [0, 1)");
        }
        if !(0.0..1.0).contains(&self.beta2) {
            return bad("beta2", "must lie in [0, 1)");
        }
        if !(self.eps > 0.0) {
            return bad("eps", "must be positive");
        }
        if !(self.weight_decay >= 0.0) {
            return bad("weight_decay", "must be >= 0");
        }
        Ok(())
    }
}

/// Adam over an ordered list of tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam<T: Float> {
    pub config: OptimizerConfig,
    pub t: u64,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
}

impl<T: Float> Adam<T> {
    pub fn new<'a>(config: OptimizerConfig, params: impl IntoIterator<Item = &'a Tensor<T>>) -> Self {
        let (m, v): (Vec<_>, Vec<_>) =
            params.into_iter().map(|p| (Tensor::zeros(p.shape()), Tensor::zeros(p.shape()))).unzip();
        Adam { config, t: 0, m, v }
    }

    pub fn len(&self) -> usize {
        self.m.len()
    }

    pub fn is_empty(&self) -> bool {
        self.m.is_empty()
    }

    /// One update of `params` in place.
    pub fn step(&mut self, params: &mut [&mut Tensor<T>], grads: &[&Tensor<T>]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(contract(format!(
                "optimizer holds {} tensors, got {} parameters and {} gradients",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        self.t += 1;
        let c = &self.config;
        let f = T::from_f64_lossy;
        let (b1, b2) = (f(c.beta1), f(c.beta2));
        let (lr, eps, wd) = (f(c.learning_rate), f(c.eps), f(c.weight_decay));
        let one = T::one();
        let bc1 = one - b1.powi(self.t.min(i32::MAX as u64) as i32);
        let bc2 = one - b2.powi(self.t.min(i32::MAX as u64) as i32);
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            if p.shape() != g.shape() || p.shape() != self.m[i].shape() {
                return Err(contract(format!("shape mismatch at optimizer slot {i}")));
            }
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            for (((p, &g), m), v) in p.data_mut().iter_mut().zip(g.data()).zip(m).zip(v) {
                let g = g + wd * *p;
                *m = b1 * *m + (one - b1) * g;
                *v = b2 * *v + (one - b2) * g * g;
                let m_hat = *m / bc1;
                let v_hat = *v / bc2;
                *p -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}
