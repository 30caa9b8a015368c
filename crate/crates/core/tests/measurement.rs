use std::sync::Arc;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use swaptrain::measurement::*;
use swaptrain::Tensor;

fn cs_dist(image: (usize, usize), patch: usize, rows: usize, seed: u64) -> ParamDistribution {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let phi = Arc::new(SensingMatrix::random_orthonormal(rows, patch, &mut rng).unwrap());
    ParamDistribution::ShiftedPartitions { phi, image }
}

#[test]
fn shifted_partition_q_is_full_rank_at_12x12() {
    let q = gram_exact(&cs_dist((12, 12), 4, 4, 0), (12, 12)).unwrap().unwrap();
    let r = q_rank_report(&q, 1e-8).unwrap();
    assert_eq!(r.rank, 144);
    assert!(r.full_rank);
}

#[test]
fn small_cs_toy_rank_depends_on_m() {
    // On a 4x4 image with 2x2 patches the corner pixels are seen by few
    // partitions: two rows per patch leave a 2-dim blind spot, three do not.
    let q = gram_exact(&cs_dist((4, 4), 2, 2, 0), (4, 4)).unwrap().unwrap();
    assert_eq!(q_rank_report(&q, 1e-8).unwrap().rank, 14);
    let q = gram_exact(&cs_dist((4, 4), 2, 3, 0), (4, 4)).unwrap().unwrap();
    assert!(q_rank_report(&q, 1e-8).unwrap().full_rank);
}

#[test]
fn single_operator_has_rank_m() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for rows in [1, 5, 9] {
        let phi = Arc::new(SensingMatrix::random_orthonormal(rows, 4, &mut rng).unwrap());
        // A 12x12 image at offset (0,0) holds 9 patches, so rank is 9·rows.
        let op: MeasurementOp = CompressivePatchOp::new(phi, (0, 0), (12, 12)).unwrap().into();
        let q = gram_exact(&ParamDistribution::Fixed(op), (12, 12)).unwrap().unwrap();
        assert_eq!(q_rank_report(&q, 1e-8).unwrap().rank, 9 * rows);
    }
}

#[test]
fn motion_kernel_q_is_full_rank_on_circular_domain() {
    let dist = ParamDistribution::MotionKernels(MotionKernels::new(5, Boundary::Circular));
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let q = gram_expectation(&dist, 1000, (16, 16), &mut rng).unwrap();
    assert!(q_rank_report(&q, 1e-8).unwrap().full_rank);
}

#[test]
fn averaged_motion_spectrum_has_no_zero_bins() {
    let gen = MotionKernels::new(5, Boundary::Zero);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let kernels: Vec<_> = (0..1000).map(|_| gen.sample(&mut rng)).collect();
    let s = kernel_spectrum(&kernels, (16, 16)).unwrap();
    assert!(s.min_over_max() > 0.05, "{}", s.min_over_max());
}

#[test]
fn gram_estimates_converge() {
    let dist = ParamDistribution::MotionKernels(MotionKernels::new(5, Boundary::Circular));
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut dists = Vec::new();
    for n in [250usize, 500, 1000] {
        // Average over repetitions so the trend is not masked by one draw.
        let mut total = 0.0;
        for _ in 0..4 {
            let a = gram_expectation(&dist, n, (8, 8), &mut rng).unwrap();
            let b = gram_expectation(&dist, 2 * n, (8, 8), &mut rng).unwrap();
            total += (a - b).norm();
        }
        dists.push(total);
    }
    assert!(dists[0] > dists[1] && dists[1] > dists[2], "{dists:?}");
}

#[test]
fn every_pixel_in_both_coverages_is_measured_once_per_partition() {
    let a = Partition::new(4, (0, 0), (12, 12)).unwrap();
    let b = Partition::new(4, (2, 2), (12, 12)).unwrap();
    let mut ca = vec![0u8; 144];
    let mut cb = vec![0u8; 144];
    a.pixel_indices().iter().for_each(|&i| ca[i] += 1);
    b.pixel_indices().iter().for_each(|&i| cb[i] += 1);
    for r in 2..10 {
        for c in 2..10 {
            assert_eq!((ca[r * 12 + c], cb[r * 12 + c]), (1, 1));
        }
    }
}

fn random_ops(seed: u64) -> Vec<MeasurementOp> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let phi = Arc::new(SensingMatrix::random_orthonormal(5, 4, &mut rng).unwrap());
    let off = (rng.random_range(0..4), rng.random_range(0..4));
    vec![
        CompressivePatchOp::new(phi, off, (12, 12)).unwrap().into(),
        MotionKernels::new(5, Boundary::Zero).sample(&mut rng).into(),
        MotionKernels::new(5, Boundary::Circular).sample(&mut rng).into(),
    ]
}

fn image(rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::new(&[12, 12], (0..144).map(|_| rng.random::<f64>() - 0.5).collect()).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn operators_are_linear(seed in any::<u64>(), a in -3.0f64..3.0, b in -3.0f64..3.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (x, y) = (image(&mut rng), image(&mut rng));
        let combo = Tensor::new(&[12, 12], x.data().iter().zip(y.data()).map(|(p, q)| a * p + b * q).collect()).unwrap();
        for op in random_ops(seed) {
            let lhs = measure(&op, &combo, GaussianNoise::none(), &mut rng).unwrap();
            let (tx, ty) = (op.apply(&x).unwrap(), op.apply(&y).unwrap());
            let scale = lhs.data().iter().fold(1e-12f64, |m, v| m.max(v.abs()));
            for ((l, p), q) in lhs.data().iter().zip(tx.data()).zip(ty.data()) {
                prop_assert!((l - (a * p + b * q)).abs() <= 1e-6 * scale);
            }
        }
    }

    #[test]
    fn adjoint_identity(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for op in random_ops(seed) {
            let x = image(&mut rng);
            let tx = op.apply(&x).unwrap();
            let y = Tensor::new(tx.shape(), (0..tx.numel()).map(|_| rng.random::<f64>()).collect()).unwrap();
            let lhs = tx.dot(&y).unwrap();
            let rhs = x.dot(&adjoint_input(&op, &y).unwrap()).unwrap();
            prop_assert!((lhs - rhs).abs() <= 1e-6 * lhs.abs().max(1e-9));
        }
    }

    #[test]
    fn motion_kernels_are_valid(seed in any::<u64>()) {
        let k = MotionKernels::new(7, Boundary::Zero).sample(&mut ChaCha8Rng::seed_from_u64(seed));
        prop_assert!(k.kernel().iter().all(|&v| v >= 0.0));
        prop_assert!((k.kernel().iter().sum::<f64>() - 1.0).abs() < 1e-6);
    }
}

