use std::sync::Arc;

use rand::Rng;

use super::compressive::{shifted_partitions, CompressivePatchOp, SensingMatrix};
use super::motion::MotionKernels;
use super::MeasurementOp;
use crate::error::{Error, Result};

/// The parameter distribution `p_θ`.
#[derive(Clone, Debug)]
pub enum ParamDistribution {
    /// Shared `Φ` with a partition offset uniform over `[0, p)²`; pairs
    /// use two distinct offsets.
    ShiftedPartitions {
        phi: Arc<SensingMatrix>,
        image: (usize, usize),
    },
    MotionKernels(MotionKernels),
    /// A single operator. Cannot produce pairs with distinct parameters.
    Fixed(MeasurementOp),
}

impl ParamDistribution {
    pub fn sample(&self, rng: &mut impl Rng) -> Result<MeasurementOp> {
        Ok(match self {
            ParamDistribution::ShiftedPartitions { phi, image } => {
                let p = phi.patch();
                let offset = (rng.random_range(0..p), rng.random_range(0..p));
                CompressivePatchOp::new(phi.clone(), offset, *image)?.into()
            }
            ParamDistribution::MotionKernels(gen) => gen.sample(rng).into(),
            ParamDistribution::Fixed(op) => op.clone(),
        })
    }

    /// Two operators with different parameters, as used for one pair.
    pub fn sample_pair(&self, rng: &mut impl Rng) -> Result<(MeasurementOp, MeasurementOp)> {
        match self {
            ParamDistribution::ShiftedPartitions { phi, image } => {
                let (a, b) = shifted_partitions(*image, phi.patch(), rng)?;
                Ok((
                    CompressivePatchOp::new(phi.clone(), a, *image)?.into(),
                    CompressivePatchOp::new(phi.clone(), b, *image)?.into(),
                ))
            }
            ParamDistribution::MotionKernels(gen) => {
                let first = gen.sample(rng);
                loop {
                    let second = gen.sample(rng);
                    if second != first {
                        return Ok((first.into(), second.into()));
                    }
                }
            }
            ParamDistribution::Fixed(_) => Err(Error::InvalidArgument(
                "a fixed operator cannot produce pairs with distinct parameters".into(),
            )),
        }
    }

    /// The full support with uniform weights, when it is finite and known.
    pub fn support(&self) -> Option<Vec<MeasurementOp>> {
        match self {
            ParamDistribution::ShiftedPartitions { phi, image } => {
                let p = phi.patch();
                let mut ops = Vec::with_capacity(p * p);
                for dy in 0..p {
                    for dx in 0..p {
                        ops.push(CompressivePatchOp::new(phi.clone(), (dy, dx), *image).ok()?.into());
                    }
                }
                Some(ops)
            }
            ParamDistribution::MotionKernels(_) => None,
            ParamDistribution::Fixed(op) => Some(vec![op.clone()]),
        }
    }

    pub fn tag(&self) -> &'static str {
        match self {
            ParamDistribution::ShiftedPartitions { .. } => "cs-shifted-partitions",
            ParamDistribution::MotionKernels(_) => "motion-kernels",
            ParamDistribution::Fixed(_) => "fixed",
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::measurement::Boundary;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn pairs_have_distinct_parameters() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let phi = Arc::new(SensingMatrix::random_orthonormal(4, 4, &mut rng).unwrap());
        let dists = [
            ParamDistribution::ShiftedPartitions { phi, image: (12, 12) },
            ParamDistribution::MotionKernels(MotionKernels::new(5, Boundary::Zero)),
        ];
        for d in &dists {
            for _ in 0..200 {
                let (a, b) = d.sample_pair(&mut rng).unwrap();
                assert_ne!(a, b);
            }
        }
        let fixed = ParamDistribution::Fixed(dists[0].sample(&mut rng).unwrap());
        assert!(fixed.sample_pair(&mut rng).is_err());
    }

    #[test]
    fn sampling_is_reproducible() {
        let d = ParamDistribution::MotionKernels(MotionKernels::new(5, Boundary::Zero));
        let a = d.sample(&mut ChaCha8Rng::seed_from_u64(8)).unwrap();
        let b = d.sample(&mut ChaCha8Rng::seed_from_u64(8)).unwrap();
        assert_eq!(a, b);
    }
}
