use crate::error::{Error, Result};
use crate::models::ParamSet;
use crate::tensor::{Real, Tensor};

/// Bias-corrected Adam.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam<T> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
}

impl<T: Real> Adam<T> {
    pub fn new(params: &ParamSet<T>) -> Self {
        let zeros = |t: &Tensor<T>| Tensor::zeros(t.shape());
        Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: params.values().iter().map(zeros).collect(),
            v: params.values().iter().map(zeros).collect(),
        }
    }

    /// One update; a `None` gradient counts as zero.
    pub fn update(&mut self, params: &mut ParamSet<T>, grads: &[Option<Tensor<T>>], lr: f64) -> Result<()> {
        if grads.len() != params.len() || self.m.len() != params.len() {
            return Err(Error::shape("adam", &[grads.len()], &[params.len()]));
        }
        self.step += 1;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powi(self.step as i32);
        let c2 = 1.0 - b2.powi(self.step as i32);
        for (i, g) in grads.iter().enumerate() {
            let p = params.value_mut(i);
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            if let Some(g) = g {
                if g.shape() != p.shape() {
                    return Err(Error::shape("adam", g.shape(), p.shape()));
                }
            }
            let gd = g.as_ref().map(|g| g.data());
            for j in 0..p.numel() {
                let gj = gd.map_or(0.0, |g| g[j].as_f64());
                let mj = b1 * m.data()[j].as_f64() + (1.0 - b1) * gj;
                let vj = b2 * v.data()[j].as_f64() + (1.0 - b2) * gj * gj;
                m.data_mut()[j] = T::of(mj);
                v.data_mut()[j] = T::of(vj);
                let delta = lr * (mj / c1) / ((vj / c2).sqrt() + self.eps);
                p.data_mut()[j] -= T::of(delta);
            }
        }
        Ok(())
    }
}
