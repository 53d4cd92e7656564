use edgesynth_tensor::{Grads, Real, Tensor};

use crate::nn::{Bound, ParamStore};
use crate::Result;

/// Adam with bias correction. With `beta1 = 0` the first moment is simply
/// the current gradient.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    pub m: ParamStore<f32>,
    pub v: ParamStore<f32>,
}

impl Adam {
    pub fn new(lr: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        Self { lr, beta1, beta2, eps, t: 0, m: ParamStore::new(), v: ParamStore::new() }
    }

    /// Update every parameter of `params` that received a gradient through
    /// its handle in `bound`.
    pub fn step<T: Real>(&mut self, params: &mut ParamStore<f32>, bound: &Bound, grads: &Grads<T>) -> Result<()> {
        self.t += 1;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powi(self.t as i32);
        let c2 = 1.0 - b2.powi(self.t as i32);
        for (name, var) in bound.iter() {
            let Some(grad) = grads.get(*var) else { continue };
            if !params.contains(name) {
                continue;
            }
            let p = params.get_mut(name)?;
            let shape = p.shape().to_vec();
            if !self.m.contains(name) {
                self.m.insert(name.clone(), Tensor::zeros(&shape));
                self.v.insert(name.clone(), Tensor::zeros(&shape));
            }
            let m = self.m.get_mut(name)?.data_mut();
            let v = self.v.get_mut(name)?.data_mut();
            for (((w, mi), vi), gi) in p.data_mut().iter_mut().zip(m.iter_mut()).zip(v.iter_mut()).zip(grad.data()) {
                let gi = gi.f64();
                let mn = b1 * *mi as f64 + (1.0 - b1) * gi;
                let vn = b2 * *vi as f64 + (1.0 - b2) * gi * gi;
                *mi = mn as f32;
                *vi = vn as f32;
                let update = self.lr * (mn / c1) / ((vn / c2).sqrt() + self.eps);
                *w = (*w as f64 - update) as f32;
            }
        }
        Ok(())
    }
}
