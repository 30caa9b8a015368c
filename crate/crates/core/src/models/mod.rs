//! The image estimator `f` and the kernel estimator `g`.

mod layers;
mod nets;
mod params;

pub use layers::{Conv, ConvSpec};
pub use nets::{CsConfig, CsEstimator, DeblurConfig, DeblurEstimator};
pub use params::{he_uniform, ParamSet, Role};

use crate::error::Result;
use crate::measurement::{Boundary, ConvolutionOp};
use crate::rng::stream;
use crate::tensor::{Real, Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq)]
pub enum Architecture {
    Cs(CsEstimator),
    Deblur(DeblurEstimator),
}

#[derive(Clone, Debug, PartialEq)]
pub enum ModelSpec {
    Cs(CsConfig),
    Deblur(DeblurConfig),
}

/// Network structure plus its parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Model<T> {
    pub arch: Architecture,
    pub params: ParamSet<T>,
}

/// Fresh parameters for `spec`, reproducible per seed.
pub fn init_params<T: Real>(spec: &ModelSpec, seed: u64) -> Result<Model<T>> {
    let mut rng = stream(seed, "init", 0);
    let mut params = ParamSet::new();
    let arch = match spec {
        ModelSpec::Cs(c) => Architecture::Cs(CsEstimator::new(c.clone(), &mut params, &mut rng)?),
        ModelSpec::Deblur(c) => Architecture::Deblur(DeblurEstimator::new(c.clone(), &mut params, &mut rng)?),
    };
    Ok(Model { arch, params })
}

impl<T: Real> Model<T> {
    /// `f` on a batch of network inputs: `Φᵀy` patches for compressive
    /// sensing, blurry images for deblurring.
    pub fn forward_image<'t>(&self, vars: &[Var<'t, T>], input: Var<'t, T>) -> Result<Var<'t, T>> {
        match &self.arch {
            Architecture::Cs(net) => net.forward(vars, input),
            Architecture::Deblur(net) => net.forward(vars, input),
        }
    }

    /// Evaluation-only forward pass on a constant tape.
    pub fn predict(&self, input: &Tensor<T>) -> Result<Tensor<T>> {
        let tape = Tape::new();
        let vars = self.params.bind_frozen(&tape);
        let out = self.forward_image(&vars, tape.constant(input.clone()))?;
        Ok((*out.value()).clone())
    }

    pub fn deblur(&self) -> Option<&DeblurEstimator> {
        match &self.arch {
            Architecture::Deblur(net) => Some(net),
            _ => None,
        }
    }

    pub fn cs(&self) -> Option<&CsEstimator> {
        match &self.arch {
            Architecture::Cs(net) => Some(net),
            _ => None,
        }
    }

    /// `θ̂ = g(y)` for a batch `[n, 1, H, W]` of blurry images.
    pub fn forward_kernel(&self, y: &Tensor<T>, boundary: Boundary) -> Result<Vec<ConvolutionOp>> {
        let net = self
            .deblur()
            .ok_or_else(|| crate::Error::Regime("kernel estimation needs a deblurring model".into()))?;
        let tape = Tape::new();
        let vars = self.params.bind_frozen(&tape);
        let feats = net.encode(&vars, tape.constant(y.clone()))?;
        let k = net.decode_kernel(&vars, &feats)?.value();
        (0..k.shape()[0])
            .map(|i| {
                let ki = k.slice_outer(i);
                let sum: f64 = ki.data().iter().map(|v| v.as_f64()).sum();
                // Renormalise in f64 so 32-bit rounding never trips the
                // kernel-sum check.
                let vals: Vec<f64> = ki.data().iter().map(|v| v.as_f64() / sum).collect();
                ConvolutionOp::new(vals, ki.shape()[0], ki.shape()[1], boundary)
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], seed: u64) -> Tensor<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.random::<f32>()).collect()).unwrap()
    }

    #[test]
    fn cs_output_matches_patch_shape_and_is_deterministic() {
        let m: Model<f32> = init_params(&ModelSpec::Cs(CsConfig::default()), 0).unwrap();
        let z = random(&[3, 1, 8, 8], 1);
        let a = m.predict(&z).unwrap();
        assert_eq!(a.shape(), &[3, 1, 8, 8]);
        assert_eq!(a, m.predict(&z).unwrap());
    }

    #[test]
    fn zeroing_second_unet_leaves_first() {
        let mut m: Model<f32> = init_params(&ModelSpec::Cs(CsConfig::default()), 0).unwrap();
        for i in 0..m.params.len() {
            if m.params.name(i).starts_with("unet2.") {
                let shape = m.params.value(i).shape().to_vec();
                *m.params.value_mut(i) = Tensor::zeros(&shape);
            }
        }
        let z = random(&[2, 1, 8, 8], 2);
        let tape = Tape::new();
        let vars = m.params.bind_frozen(&tape);
        let net = m.cs().unwrap();
        let u1 = net.forward_first(&vars, tape.constant(z.clone())).unwrap().value();
        assert_eq!(*u1, m.predict(&z).unwrap());
    }

    #[test]
    fn deblur_shapes_and_uniform_initial_kernel() {
        let m: Model<f32> = init_params(&ModelSpec::Deblur(DeblurConfig::default()), 3).unwrap();
        let y = random(&[2, 1, 32, 32], 4);
        assert_eq!(m.predict(&y).unwrap().shape(), &[2, 1, 32, 32]);
        let ks = m.forward_kernel(&y, Boundary::Zero).unwrap();
        assert_eq!(ks.len(), 2);
        for k in ks {
            assert_eq!(k.size(), (5, 5));
            assert!(k.kernel().iter().all(|v| (v - 0.04).abs() < 1e-6));
        }
    }

    #[test]
    fn init_is_seeded() {
        let spec = ModelSpec::Deblur(DeblurConfig::default());
        let a: Model<f32> = init_params(&spec, 0).unwrap();
        let b: Model<f32> = init_params(&spec, 0).unwrap();
        let c: Model<f32> = init_params(&spec, 1).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.params, c.params);
    }

    #[test]
    fn roles_partition_the_deblur_parameters() {
        let m: Model<f32> = init_params(&ModelSpec::Deblur(DeblurConfig::default()), 0).unwrap();
        let p = &m.params;
        assert!(p.numel_by_role(Role::Kernel) > 0);
        assert!(p.numel_by_role(Role::Shared) > 0);
        assert_eq!(
            p.numel(),
            p.numel_by_role(Role::Image) + p.numel_by_role(Role::Shared) + p.numel_by_role(Role::Kernel)
        );
        for i in 0..p.len() {
            let expect = if p.name(i).starts_with("conv") {
                Role::Shared
            } else if p.name(i).starts_with('k') {
                Role::Kernel
            } else {
                Role::Image
            };
            assert_eq!(p.role(i), expect, "{}", p.name(i));
        }
    }

    #[test]
    fn he_uniform_variance() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let fan_in = 64 * 9;
        let w: Tensor<f64> = he_uniform(&[128, 64, 3, 3], fan_in, &mut rng);
        let n = w.numel() as f64;
        let mean = w.sum() / n;
        let var = w.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        let target = 2.0 / fan_in as f64;
        assert!((var / target - 1.0).abs() < 0.2, "{var} vs {target}");
    }
}
