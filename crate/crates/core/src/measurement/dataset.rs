use super::{measure, GaussianNoise, MeasurementOp, ParamDistribution};
use crate::error::{Error, Result};
use crate::rng::stream;
use crate::tensor::Tensor;

/// Two measurements of one latent image. Operators are absent in blind
/// data; `x_eval` is held out for evaluation and never seen by a loss.
#[derive(Clone, Debug, PartialEq)]
pub struct MeasurementPair {
    pub y1: Tensor<f32>,
    pub y2: Tensor<f32>,
    theta: Option<(MeasurementOp, MeasurementOp)>,
    x_eval: Option<Tensor<f32>>,
}

impl MeasurementPair {
    pub fn new(
        y1: Tensor<f32>,
        y2: Tensor<f32>,
        theta: Option<(MeasurementOp, MeasurementOp)>,
        x_eval: Option<Tensor<f32>>,
    ) -> Result<Self> {
        if let Some((a, b)) = &theta {
            if a == b {
                return Err(Error::InvalidArgument("the two operators of a pair must differ".into()));
            }
        }
        Ok(MeasurementPair { y1, y2, theta, x_eval })
    }

    pub fn thetas(&self) -> Option<(&MeasurementOp, &MeasurementOp)> {
        self.theta.as_ref().map(|(a, b)| (a, b))
    }

    pub fn x_eval(&self) -> Option<&Tensor<f32>> {
        self.x_eval.as_ref()
    }

    /// Removes the operators, returning them for a sealed sidecar.
    pub fn seal(&mut self) -> Option<(MeasurementOp, MeasurementOp)> {
        self.theta.take()
    }

    pub fn strip_truth(&mut self) -> Option<Tensor<f32>> {
        self.x_eval.take()
    }
}

/// One pair per image: parameters drawn from `dist`, noise drawn once. Each
/// image uses its own derived stream, so the thread count never changes the
/// result.
pub fn build_pair_dataset(
    images: &[Tensor<f32>],
    dist: &ParamDistribution,
    noise: GaussianNoise,
    seed: u64,
    keep_truth: bool,
    threads: usize,
) -> Result<Vec<MeasurementPair>> {
    if images.is_empty() {
        return Err(Error::InvalidArgument("no images to measure".into()));
    }
    let make = |i: usize| -> Result<MeasurementPair> {
        let mut rng = stream(seed, "pair", i as u64);
        let (t1, t2) = dist.sample_pair(&mut rng)?;
        let y1 = measure(&t1, &images[i], noise, &mut rng)?;
        let y2 = measure(&t2, &images[i], noise, &mut rng)?;
        MeasurementPair::new(y1, y2, Some((t1, t2)), keep_truth.then(|| images[i].clone()))
    };
    let threads = threads.clamp(1, images.len());
    if threads == 1 {
        return (0..images.len()).map(make).collect();
    }
    let chunk = images.len().div_ceil(threads);
    std::thread::scope(|s| {
        let handles: Vec<_> = (0..threads)
            .map(|t| {
                let make = &make;
                s.spawn(move || {
                    (t * chunk..((t + 1) * chunk).min(images.len()))
                        .map(make)
                        .collect::<Result<Vec<_>>>()
                })
            })
            .collect();
        let mut out = Vec::with_capacity(images.len());
        for h in handles {
            out.extend(h.join().expect("dataset worker panicked")?);
        }
        Ok(out)
    })
}

#[cfg(test)]
mod tests {
    use std::sync::Arc;

    use super::*;
    use crate::measurement::{Boundary, CompressivePatchOp, ConvolutionOp, MotionKernels, SensingMatrix};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn images(n: usize) -> Vec<Tensor<f32>> {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        (0..n)
            .map(|_| Tensor::new(&[16, 16], (0..256).map(|_| rng.random::<f32>()).collect()).unwrap())
            .collect()
    }

    #[test]
    fn equal_operators_are_rejected() {
        let op: MeasurementOp = ConvolutionOp::delta(3, Boundary::Zero).into();
        let y = Tensor::zeros(&[4, 4]);
        assert!(MeasurementPair::new(y.clone(), y, Some((op.clone(), op)), None).is_err());
    }

    #[test]
    fn one_pair_per_image_independent_of_threads() {
        let imgs = images(10);
        let dist = ParamDistribution::MotionKernels(MotionKernels::new(5, Boundary::Zero));
        let noise = GaussianNoise::new(0.01).unwrap();
        let a = build_pair_dataset(&imgs, &dist, noise, 4, false, 1).unwrap();
        let b = build_pair_dataset(&imgs, &dist, noise, 4, false, 3).unwrap();
        assert_eq!(a.len(), 10);
        assert_eq!(a, b);
        assert!(a.iter().all(|p| p.x_eval().is_none()));
        let c = build_pair_dataset(&imgs, &dist, noise, 5, true, 1).unwrap();
        assert_ne!(a[0].y1, c[0].y1);
        assert!(c[0].x_eval().is_some());
    }

    #[test]
    fn compressive_pairs_use_shifted_partitions() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let phi = Arc::new(SensingMatrix::random_orthonormal(4, 4, &mut rng).unwrap());
        let dist = ParamDistribution::ShiftedPartitions { phi, image: (16, 16) };
        let pairs = build_pair_dataset(&images(4), &dist, GaussianNoise::none(), 1, false, 1).unwrap();
        for p in &pairs {
            let (a, b) = p.thetas().unwrap();
            let (a, b): (&CompressivePatchOp, &CompressivePatchOp) =
                (a.as_compressive().unwrap(), b.as_compressive().unwrap());
            assert_ne!(a.offset(), b.offset());
            assert_eq!(p.y1.shape(), a.measurement_shape());
        }
    }
}
