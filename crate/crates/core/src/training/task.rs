use std::sync::Arc;

use rand::Rng;

use crate::error::{Error, Result};
use crate::losses::LossKind;
use crate::measurement::{
    measure, Boundary, CompressivePatchOp, GaussianNoise, MeasurementOp, MotionKernels, ParamDistribution, SensingMatrix,
};
use crate::models::{CsConfig, DeblurConfig, ModelSpec};
use crate::rng::stream;
use crate::tensor::Tensor;

/// The measurement family an experiment works with.
#[derive(Clone, Debug)]
pub enum Task {
    Compressive {
        phi: Arc<SensingMatrix>,
        image: (usize, usize),
    },
    Deblur {
        kernels: MotionKernels,
        image: (usize, usize),
    },
}

impl Task {
    pub fn compressive(image: (usize, usize), patch: usize, ratio: f64, seed: u64) -> Result<Self> {
        let rows = SensingMatrix::rows_for_ratio(patch, ratio);
        let phi = SensingMatrix::random_orthonormal(rows, patch, &mut stream(seed, "phi", 0))?;
        Ok(Task::Compressive {
            phi: Arc::new(phi),
            image,
        })
    }

    pub fn deblur(image: (usize, usize), kernel: usize) -> Self {
        Task::Deblur {
            kernels: MotionKernels::new(kernel, Boundary::Zero),
            image,
        }
    }

    pub fn image(&self) -> (usize, usize) {
        match self {
            Task::Compressive { image, .. } | Task::Deblur { image, .. } => *image,
        }
    }

    pub fn distribution(&self) -> ParamDistribution {
        match self {
            Task::Compressive { phi, image } => ParamDistribution::ShiftedPartitions {
                phi: phi.clone(),
                image: *image,
            },
            Task::Deblur { kernels, .. } => ParamDistribution::MotionKernels(*kernels),
        }
    }

    pub fn default_rho(&self) -> LossKind {
        match self {
            Task::Compressive { .. } => LossKind::L2,
            Task::Deblur { .. } => LossKind::L1,
        }
    }

    /// Border excluded from blur residuals and deblurring PSNR.
    pub fn margin(&self) -> usize {
        match self {
            Task::Compressive { .. } => 0,
            Task::Deblur { kernels, .. } => kernels.size / 2,
        }
    }

    pub fn default_model(&self) -> ModelSpec {
        match self {
            Task::Compressive { phi, .. } => ModelSpec::Cs(CsConfig {
                patch: phi.patch(),
                ..CsConfig::default()
            }),
            Task::Deblur { kernels, image } => ModelSpec::Deblur(DeblurConfig {
                image: image.0,
                kernel: kernels.size,
                ..DeblurConfig::default()
            }),
        }
    }

    /// Operator used for evaluation measurements. For compressive sensing
    /// this is the partition at offset (0, 0), which covers the whole image
    /// when its size is a multiple of the patch.
    pub fn eval_operator(&self, rng: &mut impl Rng) -> Result<MeasurementOp> {
        match self {
            Task::Compressive { phi, image } => Ok(CompressivePatchOp::new(phi.clone(), (0, 0), *image)?.into()),
            Task::Deblur { kernels, .. } => Ok(kernels.sample(rng).into()),
        }
    }

    /// Network input for one measurement: `[patches, 1, p, p]` back-projected
    /// patches, or the `[1, 1, H, W]` blurry image.
    pub fn network_input(&self, op: &MeasurementOp, y: &Tensor<f32>) -> Result<Tensor<f32>> {
        match op {
            MeasurementOp::Compressive(cs) => cs.patch_inputs(y),
            MeasurementOp::Convolution(_) => {
                let (h, w) = (y.shape()[0], y.shape()[1]);
                y.clone().reshape(&[1, 1, h, w])
            }
        }
    }

    /// Image-shaped estimate from the network output for one measurement.
    pub fn assemble(&self, op: &MeasurementOp, out: &Tensor<f32>) -> Result<Tensor<f32>> {
        match op {
            MeasurementOp::Compressive(cs) => cs.assemble(out),
            MeasurementOp::Convolution(_) => {
                let s = out.shape();
                out.clone().reshape(&[s[s.len() - 2], s[s.len() - 1]])
            }
        }
    }

    /// Supervision target for one measurement of `x`, shaped like the
    /// network output.
    pub fn target(&self, op: &MeasurementOp, x: &Tensor<f32>) -> Result<Tensor<f32>> {
        match op {
            MeasurementOp::Compressive(cs) => {
                let p = cs.phi().patch();
                let n = cs.partition().len();
                cs.extract_patches(x)?.reshape(&[n, 1, p, p])
            }
            MeasurementOp::Convolution(_) => {
                let (h, w) = (x.shape()[0], x.shape()[1]);
                x.clone().reshape(&[1, 1, h, w])
            }
        }
    }

    pub fn check_model(&self, spec: &ModelSpec) -> Result<()> {
        let ok = match (self, spec) {
            (Task::Compressive { phi, .. }, ModelSpec::Cs(c)) => c.patch == phi.patch(),
            (Task::Deblur { kernels, image }, ModelSpec::Deblur(c)) => {
                image.0 == image.1 && c.image == image.0 && c.kernel == kernels.size
            }
            _ => false,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Regime(format!("model {spec:?} does not fit task {self:?}")))
        }
    }
}

/// A measured evaluation set. Ground truth is only ever compared against
/// predictions, never fed to a loss.
#[derive(Clone, Debug)]
pub struct EvalSet {
    pub images: Vec<Tensor<f32>>,
    pub measurements: Vec<(MeasurementOp, Tensor<f32>)>,
}

impl EvalSet {
    pub fn new(task: &Task, images: Vec<Tensor<f32>>, noise: GaussianNoise, seed: u64) -> Result<Self> {
        let measurements = images
            .iter()
            .enumerate()
            .map(|(i, x)| {
                let mut rng = stream(seed, "eval", i as u64);
                let op = task.eval_operator(&mut rng)?;
                let y = measure(&op, x, noise, &mut rng)?;
                Ok((op, y))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(EvalSet { images, measurements })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }
}
