use crate::error::{mismatch, Result};
use crate::params::{ParamGrads, ParamStore};

/// Bias-corrected Adam. Moments are kept in `f64`.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(store: &ParamStore, lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: store.iter().map(|(_, p)| vec![0.0; p.data.len()]).collect(),
            v: store.iter().map(|(_, p)| vec![0.0; p.data.len()]).collect(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn first_moment(&self, i: usize) -> &[f64] {
        &self.m[i]
    }

    pub fn second_moment(&self, i: usize) -> &[f64] {
        &self.v[i]
    }

    /// Applies one update. Parameters without a gradient keep their values
    /// and moments; the step counter advances regardless.
    pub fn step(&mut self, store: &mut ParamStore, grads: &ParamGrads) -> Result<()> {
        grads.check_against(store)?;
        if self.m.len() != store.len() {
            return Err(mismatch("adam", &[self.m.len()], &[store.len()]));
        }
        for (i, (_, p)) in store.iter().enumerate() {
            if self.m[i].len() != p.data.len() {
                return Err(mismatch("adam", &[self.m[i].len()], &p.shape));
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (i, g) in grads.grads.iter().enumerate() {
            let Some(g) = g else { continue };
            let p = store.get_mut(crate::params::ParamId(i));
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for j in 0..g.len() {
                let gj = g[j] as f64;
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * gj;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * gj * gj;
                let mh = m[j] / c1;
                let vh = v[j] / c2;
                p.data[j] = (p.data[j] as f64 - self.lr * mh / (vh.sqrt() + self.eps)) as f32;
            }
        }
        Ok(())
    }
}
