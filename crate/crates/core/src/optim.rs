//! Adaptive-moment optimizer with global-norm gradient clipping.

use crate::params::ParamStore;
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub clip_norm: Option<f64>,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8, clip_norm: Some(1.0) }
    }
}

pub struct Adam {
    pub cfg: AdamConfig,
    t: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    /// Moment state sized for the concatenation of `stores` in order.
    pub fn new(cfg: AdamConfig, stores: &[&ParamStore]) -> Self {
        let mut m = Vec::new();
        let mut v = Vec::new();
        for s in stores {
            for i in 0..s.len() {
                m.push(Tensor::zeros(s.tensor(i).shape()));
                v.push(Tensor::zeros(s.tensor(i).shape()));
            }
        }
        Adam { cfg, t: 0, m, v }
    }

    /// Apply one update. `grads` is aligned to the concatenation of `stores`
    /// in the same order used at construction; missing grads are treated as
    /// zero. Updated parameters are re-quantized onto the f32 grid.
    pub fn step(&mut self, stores: &mut [&mut ParamStore], grads: &[Option<Tensor>]) {
        let total: usize = stores.iter().map(|s| s.len()).sum();
        assert_eq!(total, grads.len(), "gradient list does not match stores");
        assert_eq!(total, self.m.len(), "optimizer state does not match stores");

        let scale = match self.cfg.clip_norm {
            Some(c) => {
                let sq: f64 = grads
                    .iter()
                    .flatten()
                    .flat_map(|g| g.data())
                    .map(|&v| v * v)
                    .sum();
                let norm = sq.sqrt();
                if norm > c {
                    c / norm
                } else {
                    1.0
                }
            }
            None => 1.0,
        };

        self.t += 1;
        let bc1 = 1.0 - self.cfg.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.cfg.beta2.powi(self.t as i32);

        let mut idx = 0;
        for store in stores.iter_mut() {
            for i in 0..store.len() {
                if let Some(g) = &grads[idx] {
                    let m = self.m[idx].data_mut();
                    let v = self.v[idx].data_mut();
                    let p = store.tensor_mut(i);
                    for ((pv, (mv, vv)), gv) in
                        p.data_mut().iter_mut().zip(m.iter_mut().zip(v.iter_mut())).zip(g.data())
                    {
                        let gc = gv * scale;
                        *mv = self.cfg.beta1 * *mv + (1.0 - self.cfg.beta1) * gc;
                        *vv = self.cfg.beta2 * *vv + (1.0 - self.cfg.beta2) * gc * gc;
                        let mhat = *mv / bc1;
                        let vhat = *vv / bc2;
                        *pv -= self.cfg.lr * mhat / (vhat.sqrt() + self.cfg.eps);
                    }
                    p.quantize_f32();
                }
                idx += 1;
            }
        }
    }
}
