use serde::{Deserialize, Serialize};

use super::{ParamSet, Tensor};
use crate::error::{dim_err, Result};

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

/// Adam with bias correction. Frozen parameters are never touched.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub cfg: AdamConfig,
    step: u64,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
}

impl Adam {
    pub fn new(cfg: AdamConfig, params: &ParamSet) -> Self {
        let zeros = || params.iter().map(|(_, t)| vec![0.0; t.len()]).collect();
        Self {
            cfg,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one update. `grads[i]` belongs to the i-th parameter; `None`
    /// means no gradient reached it this step (treated as zero).
    pub fn step(&mut self, params: &mut ParamSet, grads: &[Option<Tensor<f32>>]) -> Result<()> {
        if grads.len() != params.len() {
            return Err(dim_err!(
                "{} gradients for {} parameters",
                grads.len(),
                params.len()
            ));
        }
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (self.cfg.beta1, self.cfg.beta2);
        let c1 = 1.0 - b1.powi(t);
        let c2 = 1.0 - b2.powi(t);
        let ids: Vec<_> = params.ids().collect();
        for (i, id) in ids.into_iter().enumerate() {
            if !params.is_trainable(id) {
                continue;
            }
            let value = params.get_mut(id);
            if let Some(g) = &grads[i] {
                if g.shape() != value.shape() {
                    return Err(dim_err!(
                        "gradient {:?} for parameter {:?}",
                        g.shape(),
                        value.shape()
                    ));
                }
            }
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (j, w) in value.data_mut().iter_mut().enumerate() {
                let gj = grads[i].as_ref().map_or(0.0, |g| g.data()[j] as f64);
                let mj = b1 * m[j] as f64 + (1.0 - b1) * gj;
                let vj = b2 * v[j] as f64 + (1.0 - b2) * gj * gj;
                m[j] = mj as f32;
                v[j] = vj as f32;
                let update = self.cfg.lr * (mj / c1) / ((vj / c2).sqrt() + self.cfg.eps);
                *w = (*w as f64 - update) as f32;
            }
        }
        Ok(())
    }

    /// Moment buffers as tensors shaped like the parameters, for checkpoints.
    pub fn moments(&self, params: &ParamSet) -> (Vec<Tensor<f32>>, Vec<Tensor<f32>>) {
        let shaped = |bufs: &Vec<Vec<f32>>| {
            params
                .iter()
                .zip(bufs)
                .map(|((_, p), b)| Tensor::new(p.shape().to_vec(), b.clone()).expect("shape"))
                .collect()
        };
        (shaped(&self.m), shaped(&self.v))
    }

    pub fn restore(&mut self, step: u64, m: Vec<Vec<f32>>, v: Vec<Vec<f32>>) -> Result<()> {
        if m.len() != self.m.len()
            || v.len() != self.v.len()
            || m.iter().zip(&self.m).any(|(a, b)| a.len() != b.len())
            || v.iter().zip(&self.v).any(|(a, b)| a.len() != b.len())
        {
            return Err(dim_err!("optimizer state does not match parameters"));
        }
        self.step = step;
        self.m = m;
        self.v = v;
        Ok(())
    }
}
