//! Central finite differences against reverse-mode gradients, in f64.
//!
//! [`check`] compares one differentiable function at one point; [`suite`]
//! runs every tape operation and both estimators over a range of seeds.

use std::rc::Rc;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::Result;
use crate::losses::{combined_objective, self_loss, swap_loss, BatchOps, LossBatch, LossKind, LossParts, LossWeights};
use crate::measurement::SensingMatrix;
use crate::models::{init_params, CsConfig, DeblurConfig, ModelSpec, ParamSet};
use crate::tensor::{Padding, Tape, Tensor, Var};

/// Stencil half-width for single operations.
pub const OP_STEP: f64 = 1e-5;
/// Stencil half-width for whole networks. Smaller than [`OP_STEP`] so the
/// ReLU pre-activations of a randomly perturbed network rarely fall inside
/// the stencil; at 1e-6 one of the first hundred seeds already crosses a
/// kink.
pub const NET_STEP: f64 = 1e-7;
pub const OP_TOL: f64 = 1e-4;
pub const NET_TOL: f64 = 1e-3;

/// A scalar function of several tensors, built on a fresh tape.
pub type Objective<'a> = dyn for<'t> Fn(&'t Tape<f64>, &[Var<'t, f64>]) -> Var<'t, f64> + 'a;

/// `‖a − n‖₂ / max(‖a‖₂, ‖n‖₂, 1e-8)`.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff = analytic.iter().zip(numeric).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let na = analytic.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nn = numeric.iter().map(|x| x * x).sum::<f64>().sqrt();
    diff / na.max(nn).max(1e-8)
}

/// Worst relative error over the inputs of `f` at `inputs`.
pub fn check(inputs: &[Tensor<f64>], step: f64, f: &Objective<'_>) -> Result<f64> {
    let tape = Tape::new();
    let vars: Vec<_> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let grads = tape.backward(f(&tape, &vars))?;
    let eval = |xs: &[Tensor<f64>]| {
        let tape = Tape::new();
        let vars: Vec<_> = xs.iter().map(|t| tape.constant(t.clone())).collect();
        f(&tape, &vars).item()
    };
    let mut worst: f64 = 0.0;
    let mut xs = inputs.to_vec();
    for (i, var) in vars.iter().enumerate() {
        let analytic = grads.get_or_zeros(*var);
        let mut numeric = vec![0.0; inputs[i].numel()];
        for (j, slot) in numeric.iter_mut().enumerate() {
            let orig = inputs[i].data()[j];
            xs[i].data_mut()[j] = orig + step;
            let up = eval(&xs);
            xs[i].data_mut()[j] = orig - step;
            let down = eval(&xs);
            xs[i].data_mut()[j] = orig;
            *slot = (up - down) / (2.0 * step);
        }
        worst = worst.max(relative_error(analytic.data(), &numeric));
    }
    Ok(worst)
}

/// Outcome of one family of checks over all seeds.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheck {
    pub name: &'static str,
    pub seeds: u64,
    pub worst: f64,
    pub worst_seed: u64,
    pub tol: f64,
}

impl GradCheck {
    pub fn passed(&self) -> bool {
        self.worst < self.tol
    }
}

impl std::fmt::Display for GradCheck {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{}: worst relative error {:.2e} (seed {}) over {} seeds, tolerance {:.0e}",
            self.name, self.worst, self.worst_seed, self.seeds, self.tol
        )
    }
}

fn normal(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    let data = (0..n).map(|_| StandardNormal.sample(rng)).collect();
    Tensor::new(shape, data).expect("shape matches data")
}

/// Normal entries at least `gap` away from zero, so no kink of `relu` or
/// `abs` sits inside the stencil.
fn away_from_zero(shape: &[usize], gap: f64, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    normal(shape, rng).map(|v| if v.abs() < gap { v + gap.copysign(v) } else { v })
}

fn positive(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(0.1..1.0)).collect()).expect("shape matches data")
}

/// `Σ w ⊙ out`: every output element gets its own upstream gradient.
fn weigh<'t>(out: Var<'t, f64>, w: &Tensor<f64>) -> Var<'t, f64> {
    let tape = out.tape();
    out.mul(tape.constant(w.clone())).expect("weights match output").sum()
}

fn shape_of(f: impl for<'t> Fn(&'t Tape<f64>) -> Var<'t, f64>) -> Vec<usize> {
    let tape = Tape::new();
    f(&tape).shape()
}

fn over_seeds(
    name: &'static str,
    seeds: u64,
    tol: f64,
    mut case: impl FnMut(&mut ChaCha8Rng) -> Result<f64>,
) -> Result<GradCheck> {
    let mut out = GradCheck {
        name,
        seeds,
        worst: 0.0,
        worst_seed: 0,
        tol,
    };
    for seed in 0..seeds {
        let e = case(&mut ChaCha8Rng::seed_from_u64(seed))?;
        if e > out.worst || e.is_nan() {
            out.worst = e;
            out.worst_seed = seed;
        }
    }
    Ok(out)
}

const GEOMETRIES: [(usize, usize, Padding); 4] = [
    (3, 1, Padding::Same),
    (4, 2, Padding::Same),
    (3, 1, Padding::Valid),
    (2, 2, Padding::Valid),
];

/// Gaussian perturbation of every parameter, so zero-initialised layers
/// do not hide the paths behind them.
fn jitter(params: &mut ParamSet<f64>, rng: &mut ChaCha8Rng) {
    for i in 0..params.len() {
        for v in params.value_mut(i).data_mut() {
            *v += 0.3 * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng);
        }
    }
}

/// Every tape operation, then both estimators end to end, each over
/// `seeds` random draws.
pub fn suite(seeds: u64) -> Result<Vec<GradCheck>> {
    let mut out = Vec::new();
    out.push(over_seeds("add/sub/mul with broadcasting", seeds, OP_TOL, |rng| {
        let a = normal(&[2, 3, 4], rng);
        let b = normal(&[3, 1], rng);
        let w = normal(&[2, 3, 4], rng);
        check(&[a, b], OP_STEP, &|_, v| {
            let s = v[0].add(v[1]).unwrap();
            let d = v[0].sub(v[1]).unwrap();
            weigh(s.mul(d).unwrap().mul(v[1]).unwrap(), &w)
        })
    })?);
    out.push(over_seeds("relu/abs/square/scale/mean", seeds, OP_TOL, |rng| {
        let a = away_from_zero(&[3, 5], 1e-3, rng);
        let w = normal(&[3, 5], rng);
        check(&[a], OP_STEP, &|_, v| {
            let r = weigh(v[0].relu(), &w);
            let ab = weigh(v[0].abs(), &w);
            let sq = v[0].square().scale(0.7).mean();
            r.add(ab).unwrap().add(sq).unwrap()
        })
    })?);
    out.push(over_seeds("matmul", seeds, 1e-6, |rng| {
        let a = normal(&[3, 4], rng);
        let b = normal(&[4, 5], rng);
        let w = normal(&[3, 5], rng);
        check(&[a, b], OP_STEP, &|_, v| weigh(v[0].matmul(v[1]).unwrap(), &w))
    })?);
    out.push(over_seeds("conv2d kernel on 1x8x8", seeds, 1e-5, |rng| {
        let x = normal(&[1, 1, 8, 8], rng);
        let k = normal(&[2, 1, 3, 3], rng);
        let w = normal(&[1, 2, 8, 8], rng);
        let x = Rc::new(x);
        check(&[k], OP_STEP, &|tape, v| {
            weigh(tape.constant_rc(x.clone()).conv2d(v[0], 1, Padding::Same).unwrap(), &w)
        })
    })?);
    out.push(over_seeds("conv2d", seeds, OP_TOL, |rng| {
        let mut worst: f64 = 0.0;
        for (k, stride, pad) in GEOMETRIES {
            let x = normal(&[2, 2, 6, 5], rng);
            let kern = normal(&[3, 2, k, k], rng);
            let shape = shape_of(|t| t.constant(x.clone()).conv2d(t.constant(kern.clone()), stride, pad).unwrap());
            let w = normal(&shape, rng);
            worst = worst.max(check(&[x, kern], OP_STEP, &|_, v| {
                weigh(v[0].conv2d(v[1], stride, pad).unwrap(), &w)
            })?);
        }
        Ok(worst)
    })?);
    out.push(over_seeds("conv_transpose2d", seeds, OP_TOL, |rng| {
        let mut worst: f64 = 0.0;
        for (k, stride, pad) in GEOMETRIES {
            let x = normal(&[2, 3, 3, 4], rng);
            let kern = normal(&[3, 2, k, k], rng);
            let shape = shape_of(|t| {
                t.constant(x.clone())
                    .conv_transpose2d(t.constant(kern.clone()), stride, pad)
                    .unwrap()
            });
            let w = normal(&shape, rng);
            worst = worst.max(check(&[x, kern], OP_STEP, &|_, v| {
                weigh(v[0].conv_transpose2d(v[1], stride, pad).unwrap(), &w)
            })?);
        }
        Ok(worst)
    })?);
    out.push(over_seeds("spatial_softmax", seeds, OP_TOL, |rng| {
        let a = normal(&[2, 3, 3], rng).map(|v| 2.0 * v);
        let w = normal(&[2, 3, 3], rng);
        check(&[a], OP_STEP, &|_, v| weigh(v[0].spatial_softmax().unwrap(), &w))
    })?);
    out.push(over_seeds("per-sample blur", seeds, OP_TOL, |rng| {
        let x = normal(&[2, 2, 7, 6], rng);
        let k = positive(&[2, 3, 3], rng);
        let w = normal(&[2, 2, 7, 6], rng);
        check(&[x, k], OP_STEP, &|_, v| weigh(v[0].blur(v[1]).unwrap(), &w))
    })?);
    out.push(over_seeds("gather/scatter_add/reshape/concat", seeds, OP_TOL, |rng| {
        let a = normal(&[4, 3], rng);
        let b = normal(&[4, 2], rng);
        // Repeated indices exercise gradient accumulation.
        let gidx: Rc<[usize]> = (0..10).map(|_| rng.random_range(0..12)).collect();
        let sidx: Rc<[usize]> = (0..10).map(|_| rng.random_range(0..6)).collect();
        let w1 = normal(&[6], rng);
        let w2 = normal(&[2, 10], rng);
        check(&[a, b], OP_STEP, &|_, v| {
            let g = v[0].gather(gidx.clone(), &[10]).unwrap();
            let s = g.scatter_add(sidx.clone(), &[6]).unwrap();
            let c = Var::concat(&[v[0], v[1]], 1).unwrap().reshape(&[2, 10]).unwrap();
            weigh(s, &w1).add(weigh(c, &w2)).unwrap()
        })
    })?);

    let cs = ModelSpec::Cs(CsConfig {
        patch: 4,
        widths: vec![2, 3],
    });
    let phi = Arc::new(SensingMatrix::random_orthonormal(6, 4, &mut ChaCha8Rng::seed_from_u64(0))?);
    let (phi_m, phi_t): (Tensor<f64>, Tensor<f64>) = (phi.to_tensor(), phi.transposed());
    out.push(over_seeds("compressive estimator end to end", seeds, NET_TOL, |rng| {
        let mut model = init_params::<f64>(&cs, rng.random())?;
        jitter(&mut model.params, rng);
        let y = normal(&[2, 6], rng);
        let z = y.matmul(&phi_m)?.reshape(&[2, 1, 4, 4])?;
        let w = normal(&[2, 1, 4, 4], rng);
        check(model.params.values(), NET_STEP, &|tape, vars| {
            let out = model.forward_image(vars, tape.constant(z.clone())).unwrap();
            let proj = out.reshape(&[2, 16]).unwrap().matmul(tape.constant(phi_t.clone())).unwrap();
            let r = proj.sub(tape.constant(y.clone())).unwrap().square().sum();
            weigh(out, &w).add(r).unwrap()
        })
    })?);

    let deblur = ModelSpec::Deblur(DeblurConfig {
        image: 8,
        widths: vec![2, 3],
        kernel: 3,
        residual: true,
        kernel_head: true,
    });
    out.push(over_seeds("deblur estimator with kernel head end to end", seeds, NET_TOL, |rng| {
        let mut model = init_params::<f64>(&deblur, rng.random())?;
        jitter(&mut model.params, rng);
        let net = model.deblur().expect("deblur model").clone();
        let y1 = positive(&[2, 1, 8, 8], rng);
        let y2 = positive(&[2, 1, 8, 8], rng);
        let k1 = positive(&[2, 3, 3], rng);
        let k2 = positive(&[2, 3, 3], rng);
        let wk = normal(&[2, 3, 3], rng);
        let weights = LossWeights::new(0.5, 1.0, 1.0)?;
        check(model.params.values(), NET_STEP, &|tape, vars| {
            let (c1, c2) = (tape.constant(y1.clone()), tape.constant(y2.clone()));
            let feats = net.encode(vars, c1).unwrap();
            let f1 = net.decode_image(vars, &feats, c1).unwrap();
            let f2 = net.forward(vars, c2).unwrap();
            let k = net.decode_kernel(vars, &feats).unwrap();
            let batch = LossBatch {
                ops: BatchOps::Blur {
                    k1: tape.constant(k1.clone()),
                    k2: tape.constant(k2.clone()),
                    margin: 1,
                },
                y1: c1,
                y2: c2,
            };
            let parts = LossParts {
                swap: swap_loss(f1, f2, &batch, LossKind::L2).unwrap(),
                self_: Some(self_loss(f1, f2, &batch, LossKind::L2).unwrap()),
                prox_theta: Some(weigh(k, &wk)),
                prox_x: None,
            };
            combined_objective(&parts, &weights).unwrap()
        })
    })?);
    Ok(out)
}
