//! Adam over the trainable subset of a [`ParamStore`].

use super::params::{ParamGrads, ParamStore};
use super::tensor::Mat;

#[derive(Debug, Clone)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    moments: Vec<Option<(Mat, Mat)>>,
}

impl Adam {
    pub fn new(store: &ParamStore) -> Self {
        Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            moments: vec![None; store.len()],
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One update with learning rate `lr`. Frozen parameters and parameters
    /// without a gradient buffer are left untouched.
    pub fn step(&mut self, store: &mut ParamStore, grads: &ParamGrads, lr: f64) {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let ids: Vec<_> = store.iter().map(|(id, p)| (id, p.trainable)).collect();
        for (id, trainable) in ids {
            if !trainable {
                continue;
            }
            let Some(g) = grads.get(id) else { continue };
            let param = &mut store.get_mut(id).value;
            let (m, v) = self.moments[id.0]
                .get_or_insert_with(|| (Mat::zeros(g.rows, g.cols), Mat::zeros(g.rows, g.cols)));
            for i in 0..g.data.len() {
                let gi = g.data[i];
                m.data[i] = self.beta1 * m.data[i] + (1.0 - self.beta1) * gi;
                v.data[i] = self.beta2 * v.data[i] + (1.0 - self.beta2) * gi * gi;
                let mh = m.data[i] / c1;
                let vh = v.data[i] / c2;
                param.data[i] -= lr * mh / (vh.sqrt() + self.eps);
            }
        }
    }
}

/// Linear warmup over the first `warmup` steps, constant afterwards.
pub fn warmup_lr(base: f64, step: u64, warmup: u64) -> f64 {
    if warmup == 0 || step >= warmup {
        base
    } else {
        base * (step + 1) as f64 / warmup as f64
    }
}
