//! Adam with decoupled weight decay.

use crate::autodiff::Mat;
use crate::networks::ParamStore;

use super::config::OptimizerConfig;

#[derive(Debug, Clone, PartialEq)]
pub struct AdamW {
    pub cfg: OptimizerConfig,
    pub step: u64,
    pub m: Vec<Mat>,
    pub v: Vec<Mat>,
}

impl AdamW {
    pub fn new(cfg: OptimizerConfig, params: &ParamStore) -> Self {
        let zeros: Vec<Mat> = params.iter().map(|(_, _, p)| Mat::zeros(p.dim())).collect();
        Self { cfg, step: 0, m: zeros.clone(), v: zeros }
    }

    /// `θ ← θ − lr·(wd·θ + m̂ / (√v̂ + ε))`
    pub fn apply(&mut self, params: &mut ParamStore, grads: &[Mat]) {
        self.step += 1;
        let c = self.cfg;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        for (((p, g), m), v) in params.values_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            ndarray::Zip::from(p).and(g).and(m).and(v).for_each(|p, &g, m, v| {
                *m = c.beta1 * *m + (1.0 - c.beta1) * g;
                *v = c.beta2 * *v + (1.0 - c.beta2) * g * g;
                let update = (*m / bc1) / ((*v / bc2).sqrt() + c.eps);
                *p -= c.learning_rate * (c.weight_decay * *p + update);
            });
        }
    }
}
