use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use swaptrain::losses::*;
use swaptrain::measurement::*;
use swaptrain::synth::piecewise_constant;
use swaptrain::{Tape, Tensor, Var};

struct CsCase {
    phi_t: Tensor<f64>,
    ops: (CompressivePatchOp, CompressivePatchOp),
    f: (Tensor<f64>, Tensor<f64>),
    y: (Tensor<f64>, Tensor<f64>),
}

fn cs_case(seed: u64) -> CsCase {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let phi = Arc::new(SensingMatrix::random_orthonormal(8, 4, &mut rng).unwrap());
    let x: Tensor<f64> = piecewise_constant(8, 8, &mut rng).cast();
    let op1 = CompressivePatchOp::new(phi.clone(), (0, 0), (8, 8)).unwrap();
    let op2 = CompressivePatchOp::new(phi.clone(), (2, 1), (8, 8)).unwrap();
    let patches = |op: &CompressivePatchOp| {
        let n = op.partition().len();
        op.extract_patches(&x).unwrap().reshape(&[n, 1, 4, 4]).unwrap()
    };
    CsCase {
        phi_t: phi.transposed(),
        f: (patches(&op1), patches(&op2)),
        y: (op1.apply(&x).unwrap(), op2.apply(&x).unwrap()),
        ops: (op1, op2),
    }
}

fn cs_batch<'t>(tape: &'t Tape<f64>, c: &CsCase, flip: bool) -> LossBatch<'t, f64> {
    let (o1, o2, y1, y2) = if flip {
        (&c.ops.1, &c.ops.0, &c.y.1, &c.y.0)
    } else {
        (&c.ops.0, &c.ops.1, &c.y.0, &c.y.1)
    };
    LossBatch {
        ops: BatchOps::Compressive {
            phi_t: tape.constant(c.phi_t.clone()),
            ops1: vec![o1.clone()],
            ops2: vec![o2.clone()],
        },
        y1: tape.constant(y1.clone()),
        y2: tape.constant(y2.clone()),
    }
}

#[test]
fn compressive_losses_vanish_at_the_truth() {
    for seed in 0..10 {
        let c = cs_case(seed);
        let tape = Tape::new();
        let b = cs_batch(&tape, &c, false);
        let (f1, f2) = (tape.constant(c.f.0.clone()), tape.constant(c.f.1.clone()));
        assert!(swap_loss(f1, f2, &b, LossKind::L2).unwrap().item() < 1e-24);
        assert!(self_loss(f1, f2, &b, LossKind::L2).unwrap().item() < 1e-24);
    }
}

#[test]
fn compressive_self_loss_of_zero_estimate_is_mean_square_measurement() {
    let c = cs_case(3);
    let tape = Tape::new();
    let b = cs_batch(&tape, &c, false);
    let z1 = tape.constant(Tensor::zeros(c.f.0.shape()));
    let z2 = tape.constant(Tensor::zeros(c.f.1.shape()));
    let ms = |t: &Tensor<f64>| t.data().iter().map(|v| v * v).sum::<f64>() / t.numel() as f64;
    let expected = ms(&c.y.0) + ms(&c.y.1);
    let got = self_loss(z1, z2, &b, LossKind::L2).unwrap().item();
    assert!((got - expected).abs() < 1e-12 * expected, "{got} vs {expected}");
}

#[test]
fn compressive_swap_loss_is_symmetric_in_pair_order() {
    for seed in 0..10 {
        let mut c = cs_case(seed);
        // Perturb the estimates so the loss is not trivially zero.
        c.f.0 = c.f.0.map(|v| v * 0.7 + 0.1);
        c.f.1 = c.f.1.map(|v| v * 1.2 - 0.05);
        let tape = Tape::new();
        let (f1, f2) = (tape.constant(c.f.0.clone()), tape.constant(c.f.1.clone()));
        let a = swap_loss(f1, f2, &cs_batch(&tape, &c, false), LossKind::L2).unwrap().item();
        let b = swap_loss(f2, f1, &cs_batch(&tape, &c, true), LossKind::L2).unwrap().item();
        assert!((a - b).abs() <= 1e-14 * a.abs().max(1.0), "{a} vs {b}");
        assert!(a > 0.0);
    }
}

#[test]
fn compressive_swap_ignores_pixels_the_other_partition_never_sees() {
    // At offset (2,1) on 8×8 with 4×4 patches the second partition is a
    // single patch over rows 2..6 and columns 1..5.
    let c = cs_case(5);
    assert_eq!(c.ops.1.partition().len(), 1);
    let loss_with = |pixel: (usize, usize)| {
        let mut f1 = c.f.0.clone();
        // Patch 0 of the first partition spans rows 0..4, columns 0..4.
        f1.data_mut()[pixel.0 * 4 + pixel.1] += 0.5;
        let tape = Tape::new();
        let b = cs_batch(&tape, &c, false);
        swap_loss(tape.constant(f1), tape.constant(c.f.1.clone()), &b, LossKind::L2)
            .unwrap()
            .item()
    };
    assert!(loss_with((0, 0)) < 1e-24);
    assert!(loss_with((3, 2)) > 1e-6);
}

fn blur_case(seed: u64) -> (Tensor<f64>, [ConvolutionOp; 2]) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x: Tensor<f64> = piecewise_constant(12, 12, &mut rng).cast();
    let mk = MotionKernels::new(5, Boundary::Zero);
    (x, [mk.sample(&mut rng), mk.sample(&mut rng)])
}

fn blur_batch<'t>(tape: &'t Tape<f64>, x: &Tensor<f64>, k: &[ConvolutionOp; 2], flip: bool) -> LossBatch<'t, f64> {
    let (a, b) = if flip { (&k[1], &k[0]) } else { (&k[0], &k[1]) };
    let y = |op: &ConvolutionOp| tape.constant(op.apply(x).unwrap().reshape(&[1, 1, 12, 12]).unwrap());
    let kt = |op: &ConvolutionOp| tape.constant(op.kernel_tensor::<f64>().reshape(&[1, 5, 5]).unwrap());
    LossBatch {
        ops: BatchOps::Blur {
            k1: kt(a),
            k2: kt(b),
            margin: 2,
        },
        y1: y(a),
        y2: y(b),
    }
}

#[test]
fn blur_losses_vanish_at_the_truth_for_both_norms() {
    for seed in 0..10 {
        let (x, k) = blur_case(seed);
        let tape = Tape::new();
        let b = blur_batch(&tape, &x, &k, false);
        let f = tape.constant(x.clone().reshape(&[1, 1, 12, 12]).unwrap());
        for rho in [LossKind::L1, LossKind::L2] {
            assert!(swap_loss(f, f, &b, rho).unwrap().item() < 1e-12);
            assert!(self_loss(f, f, &b, rho).unwrap().item() < 1e-12);
        }
    }
}

#[test]
fn blur_swap_loss_is_symmetric_and_positive_off_truth() {
    for seed in 0..10 {
        let (x, k) = blur_case(seed);
        let tape = Tape::new();
        let f1 = tape.constant(x.map(|v| v * 0.9).reshape(&[1, 1, 12, 12]).unwrap());
        let f2 = tape.constant(x.map(|v| v + 0.05).reshape(&[1, 1, 12, 12]).unwrap());
        let a = swap_loss(f1, f2, &blur_batch(&tape, &x, &k, false), LossKind::L1).unwrap().item();
        let b = swap_loss(f2, f1, &blur_batch(&tape, &x, &k, true), LossKind::L1).unwrap().item();
        assert!((a - b).abs() < 1e-14, "{a} vs {b}");
        assert!(a > 0.0);
    }
}

#[test]
fn gradients_reach_estimates_but_not_constant_kernels() {
    let (x, k) = blur_case(2);
    let tape = Tape::new();
    let b = blur_batch(&tape, &x, &k, false);
    let f1 = tape.param(x.map(|v| v * 0.8).reshape(&[1, 1, 12, 12]).unwrap());
    let f2 = tape.param(x.map(|v| v * 1.1).reshape(&[1, 1, 12, 12]).unwrap());
    let loss = swap_loss(f1, f2, &b, LossKind::L2)
        .unwrap()
        .add(self_loss(f1, f2, &b, LossKind::L2).unwrap())
        .unwrap();
    let g = tape.backward(loss).unwrap();
    for f in [f1, f2] {
        assert!(g.get(f).unwrap().data().iter().any(|&v| v != 0.0));
    }
    let BatchOps::Blur { k1, k2, .. } = b.ops else { unreachable!() };
    assert!(g.get(k1).is_none() && g.get(k2).is_none());
}

#[test]
fn zero_weights_leave_terms_off_the_objective() {
    let tape = Tape::<f64>::new();
    let swap = tape.param(Tensor::scalar(1.5));
    let self_ = tape.param(Tensor::scalar(2.0));
    let prox = tape.param(Tensor::scalar(4.0));
    let parts = LossParts {
        swap,
        self_: Some(self_),
        prox_theta: Some(prox),
        prox_x: None,
    };
    let total = combined_objective(&parts, &LossWeights::new(0.0, 0.5, 1.0).unwrap()).unwrap();
    assert_eq!(total.item(), 1.5 + 2.0);
    let g = tape.backward(total).unwrap();
    assert!(g.get(self_).is_none());
    assert_eq!(g.get(prox).unwrap().item(), 0.5);
}

#[test]
fn mismatched_shapes_are_rejected() {
    let (x, k) = blur_case(1);
    let tape = Tape::new();
    let b = blur_batch(&tape, &x, &k, false);
    let bad: Var<'_, f64> = tape.constant(Tensor::zeros(&[1, 1, 10, 10]));
    assert!(swap_loss(bad, bad, &b, LossKind::L2).is_err());
    let p = tape.constant(Tensor::zeros(&[2, 3]));
    let q = tape.constant(Tensor::zeros(&[3, 2]));
    assert!(proxy_image_loss(&[(p, q)], LossKind::L1).is_err());
    assert!(proxy_param_loss::<f64>(&[], LossKind::L1).is_err());
}
