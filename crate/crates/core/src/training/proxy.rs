use crate::error::{Error, Result};
use crate::measurement::{ConvolutionOp, GaussianNoise, MeasurementOp, ParamDistribution};
use crate::rng::{derive_seed, StreamRng};
use crate::tensor::Tensor;
use rand::SeedableRng;

/// A synthetic, fully supervised sample built from the network's own
/// (gradient-isolated) prediction.
#[derive(Clone, Debug, PartialEq)]
pub struct ProxySample {
    pub x_plus: Tensor<f32>,
    pub theta_plus: ConvolutionOp,
    pub eps_seed: u64,
    pub y_plus: Tensor<f32>,
}

impl ProxySample {
    pub fn new(x_plus: Tensor<f32>, theta_plus: ConvolutionOp, noise: GaussianNoise, eps_seed: u64) -> Result<Self> {
        let mut y_plus = theta_plus.apply(&x_plus)?;
        noise.add(&mut y_plus, &mut StreamRng::seed_from_u64(eps_seed));
        Ok(ProxySample {
            x_plus,
            theta_plus,
            eps_seed,
            y_plus,
        })
    }

    /// `θ⁺x⁺ + ε⁺` recomputed from the stored fields.
    pub fn regenerate(&self, noise: GaussianNoise) -> Result<Tensor<f32>> {
        Ok(ProxySample::new(self.x_plus.clone(), self.theta_plus.clone(), noise, self.eps_seed)?.y_plus)
    }
}

/// Proxy samples for a batch of detached predictions `[B, 1, H, W]`, with
/// fresh `θ⁺` and `ε⁺` for every `(step, slot)`.
pub fn make_proxy_batch(
    x_plus: &Tensor<f32>,
    dist: &ParamDistribution,
    noise: GaussianNoise,
    seed: u64,
    step: u64,
    slot: u64,
) -> Result<Vec<ProxySample>> {
    let s = x_plus.shape();
    if s.len() != 4 || s[1] != 1 {
        return Err(Error::InvalidArgument(format!("proxy images must be [B, 1, H, W], got {s:?}")));
    }
    let mut rng = StreamRng::seed_from_u64(derive_seed(seed, "proxy-theta", step * 2 + slot));
    (0..s[0])
        .map(|b| {
            let theta = match dist.sample(&mut rng)? {
                MeasurementOp::Convolution(k) => k,
                MeasurementOp::Compressive(_) => {
                    return Err(Error::Regime("proxy training needs a blur-kernel distribution".into()))
                }
            };
            let x = x_plus.slice_outer(b).reshape(&[s[2], s[3]])?;
            let eps_seed = derive_seed(seed, "proxy-noise", (step * 2 + slot) << 16 | b as u64);
            ProxySample::new(x, theta, noise, eps_seed)
        })
        .collect()
}
