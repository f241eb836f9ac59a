use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ParamStore;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
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

/// Adam with bias correction. One `(m, v)` pair per parameter and a shared
/// step counter.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    pub t: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl Adam {
    pub fn new(store: &ParamStore, config: AdamConfig) -> Self {
        let zeros: Vec<Tensor> = store.iter().map(|(_, _, t)| Tensor::zeros(t.shape())).collect();
        Self {
            config,
            t: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// Apply one update. `grads[i]` belongs to parameter `i`; parameters
    /// with `None` are left untouched and keep their moments.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[Option<Tensor>]) -> Result<()> {
        if grads.len() != store.len() || self.m.len() != store.len() {
            return Err(Error::dim("adam", &[store.len()], &[grads.len(), self.m.len()]));
        }
        self.t += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        let bc1 = 1.0 - beta1.powi(self.t as i32);
        let bc2 = 1.0 - beta2.powi(self.t as i32);
        for (id, g) in store.ids().collect::<Vec<_>>().into_iter().zip(grads) {
            let Some(g) = g else { continue };
            let i = id.index();
            let p = store.get_mut(id);
            if g.shape() != p.shape() {
                return Err(Error::dim("adam grad", p.shape(), g.shape()));
            }
            let (m, v) = (self.m[i].data_mut(), self.v[i].data_mut());
            for (((w, &gj), mj), vj) in p.data_mut().iter_mut().zip(g.data()).zip(m).zip(v) {
                *mj = beta1 * *mj + (1.0 - beta1) * gj;
                *vj = beta2 * *vj + (1.0 - beta2) * gj * gj;
                let mhat = *mj / bc1;
                let vhat = *vj / bc2;
                *w -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}
