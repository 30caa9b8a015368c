//! Linear measurement operators `θ`, additive Gaussian noise, paired
//! datasets and the `Q = E[θᵀθ]` diagnostics.

mod blur;
mod compressive;
mod dataset;
mod distribution;
mod gram;
mod motion;
mod spectrum;

pub use blur::{Boundary, ConvolutionOp, KERNEL_SUM_TOL};
pub use compressive::{shifted_partitions, CompressivePatchOp, Partition, SensingMatrix, ORTHONORMAL_TOL};
pub use dataset::{build_pair_dataset, MeasurementPair};
pub use distribution::ParamDistribution;
pub use gram::{gram_exact, gram_expectation, gram_from_ops, min_eigenvalue_matrix_free, q_rank_report, QRankReport, MAX_GRAM_DIM};
pub use motion::MotionKernels;
pub use spectrum::{kernel_spectrum, KernelSpectrum};

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// A measurement operator `θ` acting on 2-D images.
#[derive(Clone, Debug, PartialEq)]
pub enum MeasurementOp {
    Compressive(CompressivePatchOp),
    Convolution(ConvolutionOp),
}

impl MeasurementOp {
    pub fn apply<T: Real>(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        match self {
            MeasurementOp::Compressive(op) => op.apply(x),
            MeasurementOp::Convolution(op) => op.apply(x),
        }
    }

    /// `θᵀy` in image geometry.
    pub fn adjoint<T: Real>(&self, y: &Tensor<T>) -> Result<Tensor<T>> {
        match self {
            MeasurementOp::Compressive(op) => op.adjoint(y),
            MeasurementOp::Convolution(op) => op.adjoint(y),
        }
    }

    pub fn as_compressive(&self) -> Option<&CompressivePatchOp> {
        match self {
            MeasurementOp::Compressive(op) => Some(op),
            _ => None,
        }
    }

    pub fn as_convolution(&self) -> Option<&ConvolutionOp> {
        match self {
            MeasurementOp::Convolution(op) => Some(op),
            _ => None,
        }
    }

    /// Rows of the explicit matrix on an `h×w` image.
    pub fn sparse_rows(&self, image: (usize, usize)) -> Result<Vec<Vec<(usize, f64)>>> {
        match self {
            MeasurementOp::Compressive(op) => {
                if op.image() != image {
                    return Err(Error::shape(
                        "materialize",
                        &[op.image().0, op.image().1],
                        &[image.0, image.1],
                    ));
                }
                Ok(op.sparse_rows())
            }
            MeasurementOp::Convolution(op) => Ok(op.sparse_rows(image.0, image.1)),
        }
    }

    /// Explicit `M×N` matrix, limited to `N ≤ MAX_GRAM_DIM`.
    pub fn materialize(&self, image: (usize, usize)) -> Result<DMatrix<f64>> {
        let n = image.0 * image.1;
        if n > MAX_GRAM_DIM {
            return Err(Error::SizeLimit(format!(
                "cannot materialize an operator on {n} pixels (limit {MAX_GRAM_DIM})"
            )));
        }
        let rows = self.sparse_rows(image)?;
        let mut m = DMatrix::zeros(rows.len(), n);
        for (r, row) in rows.iter().enumerate() {
            for &(c, v) in row {
                m[(r, c)] += v;
            }
        }
        Ok(m)
    }
}

impl From<CompressivePatchOp> for MeasurementOp {
    fn from(op: CompressivePatchOp) -> Self {
        MeasurementOp::Compressive(op)
    }
}

impl From<ConvolutionOp> for MeasurementOp {
    fn from(op: ConvolutionOp) -> Self {
        MeasurementOp::Convolution(op)
    }
}

/// i.i.d. zero-mean Gaussian noise with standard deviation `sigma`, in
/// image-intensity units.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GaussianNoise {
    sigma: f64,
}

impl GaussianNoise {
    /// Two gray levels of an 8-bit image.
    pub const TWO_GRAY_LEVELS: f64 = 2.0 / 255.0;

    pub fn new(sigma: f64) -> Result<Self> {
        if !(sigma >= 0.0) || !sigma.is_finite() {
            return Err(Error::InvalidArgument(format!("noise sigma must be >= 0, got {sigma}")));
        }
        Ok(GaussianNoise { sigma })
    }

    pub fn none() -> Self {
        GaussianNoise { sigma: 0.0 }
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    pub fn add<T: Real>(&self, y: &mut Tensor<T>, rng: &mut impl Rng) {
        if self.sigma == 0.0 {
            return;
        }
        for v in y.data_mut() {
            let e: f64 = rng.sample(StandardNormal);
            *v += T::of(self.sigma * e);
        }
    }
}

/// `y = θx + ε`.
pub fn measure<T: Real>(
    theta: &MeasurementOp,
    x: &Tensor<T>,
    noise: GaussianNoise,
    rng: &mut impl Rng,
) -> Result<Tensor<T>> {
    let mut y = theta.apply(x)?;
    noise.add(&mut y, rng);
    Ok(y)
}

/// `θᵀy` reshaped to image geometry.
pub fn adjoint_input<T: Real>(theta: &MeasurementOp, y: &Tensor<T>) -> Result<Tensor<T>> {
    theta.adjoint(y)
}

#[cfg(test)]
mod tests {
    use std::sync::Arc;

    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn identity_ops_measure_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = Tensor::<f64>::new(&[8, 8], (0..64).map(|i| i as f64 / 64.0).collect()).unwrap();
        let cs: MeasurementOp =
            CompressivePatchOp::new(Arc::new(SensingMatrix::identity(4)), (0, 0), (8, 8)).unwrap().into();
        let y = measure(&cs, &x, GaussianNoise::none(), &mut rng).unwrap();
        assert_eq!(adjoint_input(&cs, &y).unwrap(), x);
        let blur: MeasurementOp = ConvolutionOp::delta(3, Boundary::Zero).into();
        assert_eq!(measure(&blur, &x, GaussianNoise::none(), &mut rng).unwrap(), x);
    }

    #[test]
    fn materialized_matrix_matches_apply() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let phi = Arc::new(SensingMatrix::random_orthonormal(3, 3, &mut rng).unwrap());
        let ops: Vec<MeasurementOp> = vec![
            CompressivePatchOp::new(phi, (1, 2), (7, 8)).unwrap().into(),
            MotionKernels::new(5, Boundary::Zero).sample(&mut rng).into(),
            MotionKernels::new(5, Boundary::Circular).sample(&mut rng).into(),
        ];
        let x = Tensor::<f64>::new(&[7, 8], (0..56).map(|_| rng.random::<f64>()).collect()).unwrap();
        for op in ops {
            let m = op.materialize((7, 8)).unwrap();
            let y = op.apply(&x).unwrap();
            let mx = &m * nalgebra::DVector::from_column_slice(x.data());
            for (a, b) in y.data().iter().zip(mx.iter()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn noise_rejects_negative_sigma() {
        assert!(GaussianNoise::new(-1e-3).is_err());
        assert!(GaussianNoise::new(f64::NAN).is_err());
        assert!((GaussianNoise::TWO_GRAY_LEVELS - 0.007_843_137).abs() < 1e-9);
    }

    #[test]
    fn materialize_refuses_large_images() {
        let op: MeasurementOp = ConvolutionOp::delta(3, Boundary::Zero).into();
        assert!(matches!(op.materialize((128, 128)), Err(Error::SizeLimit(_))));
    }
}
