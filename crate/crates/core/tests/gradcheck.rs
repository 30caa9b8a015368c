use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use swaptrain::gradcheck::{check, relative_error, suite, OP_STEP};
use swaptrain::{Tape, Tensor};

fn normal(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| StandardNormal.sample(rng)).collect()).unwrap()
}

#[test]
fn every_operation_and_both_estimators_over_100_seeds() {
    let results = suite(100).unwrap();
    assert_eq!(results.len(), 11);
    for r in &results {
        eprintln!("{r}");
    }
    for r in &results {
        assert!(r.passed(), "{r}");
    }
}

#[test]
fn checker_flags_a_wrong_gradient() {
    // `detach` severs the path, so the tape reports half the true
    // derivative of x·x; the checker has to notice.
    let x = Tensor::from_f64(&[3], &[0.5, -1.0, 2.0]).unwrap();
    let e = check(&[x], OP_STEP, &|_, v| v[0].mul(v[0].detach()).unwrap().sum()).unwrap();
    assert!((e - 0.5).abs() < 1e-6, "{e}");
}

#[test]
fn detached_factor_is_treated_as_constant() {
    for seed in 0..100 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = normal(&[5], &mut rng);
        let w = normal(&[5], &mut rng);
        let tape = Tape::new();
        let x = tape.param(a.clone());
        let loss = x.mul(x.detach()).unwrap().mul(tape.constant(w.clone())).unwrap().sum();
        let g = tape.backward(loss).unwrap().get_or_zeros(x);
        for i in 0..5 {
            assert_eq!(g.data()[i], w.data()[i] * a.data()[i]);
        }
    }
}

#[test]
fn matmul_and_transposed_matmul_are_adjoint() {
    for seed in 0..100 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = normal(&[4, 6], &mut rng);
        let x = normal(&[6, 1], &mut rng);
        let y = normal(&[4, 1], &mut rng);
        let at = Tensor::new(&[6, 4], (0..24).map(|i| a.data()[(i % 4) * 6 + i / 4]).collect()).unwrap();
        let lhs = a.matmul(&x).unwrap().dot(&y).unwrap();
        let rhs = x.dot(&at.matmul(&y).unwrap()).unwrap();
        assert!(relative_error(&[lhs], &[rhs]) < 1e-6);
    }
}
