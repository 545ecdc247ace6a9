//! AdamW with decoupled weight decay and per-parameter learning-rate
//! multipliers.

use repsgg_tensor::ParamStore;

use crate::config::OptimConfig;

#[derive(Clone, Debug)]
pub struct AdamW {
    cfg: OptimConfig,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    multipliers: Vec<f64>,
    step: u64,
}

impl AdamW {
    /// `multiplier(name)` scales the learning rate of each parameter.
    pub fn new(cfg: OptimConfig, store: &ParamStore, multiplier: impl Fn(&str) -> f64) -> Self {
        let sizes: Vec<usize> = store.iter().map(|(_, p)| p.tensor.numel()).collect();
        AdamW {
            cfg,
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            multipliers: store.iter().map(|(_, p)| multiplier(&p.name)).collect(),
            step: 0,
        }
    }

    /// Global L2 norm of the stored gradients.
    pub fn grad_norm(store: &ParamStore) -> f64 {
        store
            .iter()
            .filter_map(|(_, p)| p.tensor.grad.as_ref())
            .flat_map(|g| g.iter())
            .map(|g| g * g)
            .sum::<f64>()
            .sqrt()
    }

    /// One update at learning rate `lr`; parameters without a gradient only
    /// decay.
    pub fn step(&mut self, store: &mut ParamStore, lr: f64) {
        self.step += 1;
        let c = &self.cfg;
        let clip = match c.grad_clip {
            Some(max) => {
                let norm = Self::grad_norm(store);
                if norm > max {
                    max / norm
                } else {
                    1.0
                }
            }
            None => 1.0,
        };
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        for (i, (_, p)) in store.iter_mut().enumerate() {
            let rate = lr * self.multipliers[i];
            let grad = p.tensor.grad.take();
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            let data = p.tensor.data_mut();
            for k in 0..data.len() {
                data[k] -= rate * c.weight_decay * data[k];
                let g = grad.as_ref().map_or(0.0, |g| g[k] * clip);
                m[k] = c.beta1 * m[k] + (1.0 - c.beta1) * g;
                v[k] = c.beta2 * v[k] + (1.0 - c.beta2) * g * g;
                data[k] -= rate * (m[k] / bc1) / ((v[k] / bc2).sqrt() + c.eps);
            }
        }
    }
}
