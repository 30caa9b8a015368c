//! Numerical checks of the expected swap-loss identity on small dense
//! problems.
//!
//! Linear estimators take the adjoint input: `f(y) = W θᵀy`. Swap losses
//! here are sums over measurement elements (not means), so the noise term
//! of the identity is `2σ²E[M]` with `M` the measurement count.

use std::fmt;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::measurement::{
    q_rank_report, GaussianNoise, MeasurementOp, ParamDistribution, QRankReport, MAX_GRAM_DIM,
};
use crate::rng::stream;

/// Samples per deterministic Monte-Carlo chunk.
const CHUNK: usize = 10_000;

/// Largest image dimension accepted by the linear oracle.
pub const MAX_ORACLE_DIM: usize = 256;

/// Gaussian images with a known mean and covariance.
#[derive(Clone, Debug)]
pub struct GaussianImages {
    image: (usize, usize),
    mean: DVector<f64>,
    cov: DMatrix<f64>,
    chol: DMatrix<f64>,
}

impl GaussianImages {
    pub fn new(image: (usize, usize), mean: DVector<f64>, cov: DMatrix<f64>) -> Result<Self> {
        let n = image.0 * image.1;
        if mean.len() != n || cov.shape() != (n, n) {
            return Err(Error::shape("GaussianImages", &[n, n], &[cov.nrows(), cov.ncols()]));
        }
        let chol = cov
            .clone()
            .cholesky()
            .ok_or_else(|| Error::InvalidArgument("covariance is not positive definite".into()))?
            .l();
        Ok(GaussianImages { image, mean, cov, chol })
    }

    /// Constant mean and separable AR(1) covariance
    /// `std² · ρ^{|Δrow| + |Δcol|}`.
    pub fn banded(image: (usize, usize), mean: f64, std: f64, rho: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&rho) || std <= 0.0 {
            return Err(Error::InvalidArgument(format!(
                "banded covariance needs std > 0 and 0 <= rho < 1, got std={std}, rho={rho}"
            )));
        }
        let (h, w) = image;
        let n = h * w;
        let cov = DMatrix::from_fn(n, n, |i, j| {
            let d = (i / w).abs_diff(j / w) + (i % w).abs_diff(j % w);
            std * std * rho.powi(d as i32)
        });
        Self::new(image, DVector::from_element(n, mean), cov)
    }

    pub fn image(&self) -> (usize, usize) {
        self.image
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }

    pub fn cov(&self) -> &DMatrix<f64> {
        &self.cov
    }

    pub fn sample(&self, rng: &mut impl Rng) -> DVector<f64> {
        let g = DVector::from_fn(self.dim(), |_, _| rng.sample::<f64, _>(StandardNormal));
        &self.mean + &self.chol * g
    }

    /// `E[xᵀAx] = tr(AΣ) + μᵀAμ`.
    pub fn quadratic_expectation(&self, a: &DMatrix<f64>) -> f64 {
        (a * &self.cov).trace() + (self.mean.transpose() * a * &self.mean)[(0, 0)]
    }
}

/// Dense operators drawn uniformly, one matrix per parameter value.
#[derive(Clone, Debug)]
pub struct OperatorSet {
    image: (usize, usize),
    ops: Vec<DMatrix<f64>>,
    grams: Vec<DMatrix<f64>>,
}

impl OperatorSet {
    pub fn from_ops(ops: &[MeasurementOp], image: (usize, usize)) -> Result<Self> {
        if ops.is_empty() {
            return Err(Error::InvalidArgument("operator set is empty".into()));
        }
        let ops = ops.iter().map(|op| op.materialize(image)).collect::<Result<Vec<_>>>()?;
        let grams = ops.iter().map(|a| a.transpose() * a).collect();
        Ok(OperatorSet { image, ops, grams })
    }

    /// The exact support when known, otherwise `n_samples` draws standing in
    /// for the distribution.
    pub fn from_distribution(
        dist: &ParamDistribution,
        image: (usize, usize),
        n_samples: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let ops = match dist.support() {
            Some(ops) => ops,
            None => (0..n_samples).map(|_| dist.sample(rng)).collect::<Result<Vec<_>>>()?,
        };
        Self::from_ops(&ops, image)
    }

    pub fn len(&self) -> usize {
        self.ops.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ops.is_empty()
    }

    pub fn image(&self) -> (usize, usize) {
        self.image
    }

    pub fn dim(&self) -> usize {
        self.image.0 * self.image.1
    }

    pub fn op(&self, k: usize) -> &DMatrix<f64> {
        &self.ops[k]
    }

    /// `Q = E[θᵀθ]`.
    pub fn gram(&self) -> DMatrix<f64> {
        let n = self.dim();
        let mut q = DMatrix::zeros(n, n);
        for g in &self.grams {
            q += g;
        }
        q / self.len() as f64
    }

    /// `E[M]`, the expected measurement count.
    pub fn mean_rows(&self) -> f64 {
        self.ops.iter().map(|a| a.nrows() as f64).sum::<f64>() / self.len() as f64
    }

    /// `2σ²E[M]`, the swap-loss floor.
    pub fn noise_floor(&self, noise: GaussianNoise) -> f64 {
        2.0 * noise.sigma().powi(2) * self.mean_rows()
    }
}

/// One draw of `(x, θ₁, θ₂, ε₁, ε₂)` with `θ₁, θ₂` independent.
struct Draw {
    x: DVector<f64>,
    k1: usize,
    k2: usize,
    y1: DVector<f64>,
    y2: DVector<f64>,
    z1: DVector<f64>,
    z2: DVector<f64>,
}

fn draw(ops: &OperatorSet, noise: GaussianNoise, px: &GaussianImages, rng: &mut impl Rng) -> Draw {
    let x = px.sample(rng);
    let k1 = rng.random_range(0..ops.len());
    let k2 = rng.random_range(0..ops.len());
    let mut measure = |k: usize| {
        let a = ops.op(k);
        let y = a * &x + DVector::from_fn(a.nrows(), |_, _| noise.sigma() * rng.sample::<f64, _>(StandardNormal));
        let z = a.transpose() * &y;
        (y, z)
    };
    let (y1, z1) = measure(k1);
    let (y2, z2) = measure(k2);
    Draw { x, k1, k2, y1, y2, z1, z2 }
}

/// Runs `visit` over `n` draws in fixed-size chunks, each chunk seeded from
/// its own stream.
fn for_each_draw(
    ops: &OperatorSet,
    noise: GaussianNoise,
    px: &GaussianImages,
    n: usize,
    seed: u64,
    purpose: &str,
    mut visit: impl FnMut(&Draw),
) {
    let chunks = n.div_ceil(CHUNK);
    for c in 0..chunks {
        let mut rng = stream(seed, purpose, c as u64);
        let len = CHUNK.min(n - c * CHUNK);
        for _ in 0..len {
            visit(&draw(ops, noise, px, &mut rng));
        }
    }
}

fn check_inputs(ops: &OperatorSet, px: &GaussianImages, n: usize) -> Result<()> {
    if ops.image() != px.image() {
        return Err(Error::InvalidArgument(format!(
            "operator image {:?} differs from sampler image {:?}",
            ops.image(),
            px.image()
        )));
    }
    if ops.dim() > MAX_GRAM_DIM {
        return Err(Error::SizeLimit(format!("N = {} exceeds {MAX_GRAM_DIM}", ops.dim())));
    }
    if n == 0 {
        return Err(Error::InvalidArgument("need at least one sample".into()));
    }
    Ok(())
}

fn swap_integrand(w: &DMatrix<f64>, ops: &OperatorSet, d: &Draw) -> f64 {
    let r2 = ops.op(d.k2) * (w * &d.z1) - &d.y2;
    let r1 = ops.op(d.k1) * (w * &d.z2) - &d.y1;
    r2.norm_squared() + r1.norm_squared()
}

fn mean_and_se(sum: f64, sum_sq: f64, n: usize) -> (f64, f64) {
    let n = n as f64;
    let mean = sum / n;
    let var = if n > 1.0 {
        ((sum_sq - n * mean * mean) / (n - 1.0)).max(0.0)
    } else {
        0.0
    };
    (mean, (var / n).sqrt())
}

#[derive(Clone, Debug)]
pub struct IdentityReport {
    pub n: usize,
    /// Monte-Carlo mean of the swap integrand.
    pub lhs: f64,
    pub lhs_se: f64,
    /// `2σ²E[M] + 2·E_MC[(f − x)ᵀQ(f − x)]`.
    pub rhs: f64,
    pub rel_err: f64,
}

impl fmt::Display for IdentityReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "swap identity (n={}): lhs {:.6} (s.e. {:.2e}), rhs {:.6}, rel_err {:.3e}",
            self.n, self.lhs, self.lhs_se, self.rhs, self.rel_err
        )
    }
}

/// Compares the empirical swap loss of `f(y) = W θᵀy` with its predicted
/// value `2σ²E[M] + 2E[(f − x)ᵀQ(f − x)]`, using the same draws for both sides.
/// The quadratic term averages over both measurements of each draw.
pub fn mc_swap_identity(
    w: &DMatrix<f64>,
    ops: &OperatorSet,
    noise: GaussianNoise,
    px: &GaussianImages,
    n: usize,
    seed: u64,
) -> Result<IdentityReport> {
    check_inputs(ops, px, n)?;
    let dim = ops.dim();
    if w.shape() != (dim, dim) {
        return Err(Error::shape("mc_swap_identity", &[dim, dim], &[w.nrows(), w.ncols()]));
    }
    let q = ops.gram();
    let (mut sum, mut sum_sq, mut quad) = (0.0, 0.0, 0.0);
    for_each_draw(ops, noise, px, n, seed, "theory-identity", |d| {
        let v = swap_integrand(w, ops, d);
        sum += v;
        sum_sq += v * v;
        for z in [&d.z1, &d.z2] {
            let e = w * z - &d.x;
            quad += e.dot(&(&q * &e));
        }
    });
    let (lhs, lhs_se) = mean_and_se(sum, sum_sq, n);
    let rhs = ops.noise_floor(noise) + quad / n as f64;
    Ok(IdentityReport {
        n,
        lhs,
        lhs_se,
        rhs,
        rel_err: relative(lhs, rhs),
    })
}

fn relative(a: f64, b: f64) -> f64 {
    let scale = a.abs().max(b.abs());
    if scale == 0.0 {
        0.0
    } else {
        (a - b).abs() / scale
    }
}

/// Expected swap loss of `f = 0`: `2σ²E[M] + 2(tr(QΣ) + μᵀQμ)`.
pub fn zero_estimator_loss(ops: &OperatorSet, noise: GaussianNoise, px: &GaussianImages) -> f64 {
    ops.noise_floor(noise) + 2.0 * px.quadratic_expectation(&ops.gram())
}

/// Sufficient statistics for both linear fits over one sampled population.
struct Moments {
    /// `Σ zzᵀ` over inputs whose swap target was measured by operator `k`.
    zz_by_op: Vec<DMatrix<f64>>,
    /// `Σ θ_tgtᵀ y_tgt zᵀ`.
    swap_rhs: DMatrix<f64>,
    /// `Σ zzᵀ` over all inputs.
    zz: DMatrix<f64>,
    /// `Σ x zᵀ`.
    xz: DMatrix<f64>,
}

fn accumulate(ops: &OperatorSet, noise: GaussianNoise, px: &GaussianImages, n: usize, seed: u64) -> Moments {
    let dim = ops.dim();
    let mut m = Moments {
        zz_by_op: vec![DMatrix::zeros(dim, dim); ops.len()],
        swap_rhs: DMatrix::zeros(dim, dim),
        zz: DMatrix::zeros(dim, dim),
        xz: DMatrix::zeros(dim, dim),
    };
    for_each_draw(ops, noise, px, n, seed, "theory-fit", |d| {
        for (z, k_tgt, y_tgt) in [(&d.z1, d.k2, &d.y2), (&d.z2, d.k1, &d.y1)] {
            let zzt = z * z.transpose();
            m.zz_by_op[k_tgt] += &zzt;
            m.zz += &zzt;
            m.swap_rhs += (ops.op(k_tgt).transpose() * y_tgt) * z.transpose();
            m.xz += &d.x * z.transpose();
        }
    });
    m
}

/// Minimum-norm solution of `Σ_k G_k W Z_k = B` by conjugate gradients,
/// started from zero so the iterate stays in the range of the operator.
fn solve_swap(ops: &OperatorSet, m: &Moments) -> DMatrix<f64> {
    let dim = ops.dim();
    let apply = |w: &DMatrix<f64>| {
        let mut out = DMatrix::zeros(dim, dim);
        for (g, z) in ops.grams.iter().zip(&m.zz_by_op) {
            out += g * w * z;
        }
        out
    };
    let b = &m.swap_rhs;
    let b_norm = b.norm();
    let mut w = DMatrix::zeros(dim, dim);
    if b_norm == 0.0 {
        return w;
    }
    let mut r = b.clone();
    let mut p = r.clone();
    let mut rr = r.norm_squared();
    for _ in 0..10 * dim * dim {
        if rr.sqrt() <= 1e-13 * b_norm {
            break;
        }
        let ap = apply(&p);
        let alpha = rr / p.dot(&ap);
        w += alpha * &p;
        r -= alpha * &ap;
        let rr_next = r.norm_squared();
        p = &r + (rr_next / rr) * &p;
        rr = rr_next;
    }
    w
}

/// Minimum-norm least squares `W Σzzᵀ = Σxzᵀ` through a truncated SVD.
fn solve_supervised(m: &Moments) -> DMatrix<f64> {
    let svd = m.zz.clone().svd(true, true);
    let cut = 1e-12 * svd.singular_values.max();
    let pinv = svd.pseudo_inverse(cut).expect("both factors were computed");
    &m.xz * pinv
}

fn psnr_of(w: &DMatrix<f64>, ops: &OperatorSet, noise: GaussianNoise, px: &GaussianImages, n: usize, seed: u64) -> f64 {
    let mut sq = 0.0;
    for_each_draw(ops, noise, px, n, seed, "theory-eval", |d| {
        sq += (w * &d.z1 - &d.x).norm_squared();
    });
    let mse = sq / (n * ops.dim()) as f64;
    crate::training::psnr_from_mse(mse)
}

#[derive(Clone, Debug)]
pub struct OracleReport {
    pub w_swap: DMatrix<f64>,
    pub w_sup: DMatrix<f64>,
    /// `‖W_swap − W_sup‖_F / ‖W_sup‖_F`.
    pub param_dist: f64,
    pub psnr_swap: f64,
    pub psnr_sup: f64,
    pub psnr_gap: f64,
    pub q: QRankReport,
}

impl fmt::Display for OracleReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "linear oracle: swap {:.3} dB, supervised {:.3} dB, gap {:.3} dB, relative parameter distance {:.3e}",
            self.psnr_swap, self.psnr_sup, self.psnr_gap, self.param_dist
        )
    }
}

/// Rank threshold used by the oracle's refusal, relative to `λ_max(Q)`.
pub const ORACLE_RANK_THRESHOLD: f64 = 1e-8;

/// Fits swap-trained and supervised linear estimators on the same sampled
/// population and compares them on fresh draws. Refuses when `Q` is rank
/// deficient.
pub fn linear_oracle(
    ops: &OperatorSet,
    noise: GaussianNoise,
    px: &GaussianImages,
    n_train: usize,
    n_eval: usize,
    seed: u64,
) -> Result<OracleReport> {
    check_inputs(ops, px, n_train.min(n_eval))?;
    if ops.dim() > MAX_ORACLE_DIM {
        return Err(Error::SizeLimit(format!(
            "linear oracle supports N <= {MAX_ORACLE_DIM}, got {}",
            ops.dim()
        )));
    }
    let q = q_rank_report(&ops.gram(), ORACLE_RANK_THRESHOLD)?;
    if !q.full_rank {
        let dim = q.eigenvalues.len();
        return Err(Error::RankDeficient {
            rank: q.rank,
            dim,
            null_dim: q.null_dim(),
            smallest: q.eigenvalues[q.rank..].iter().take(4).copied().collect(),
        });
    }
    let m = accumulate(ops, noise, px, n_train, seed);
    let w_swap = solve_swap(ops, &m);
    let w_sup = solve_supervised(&m);
    let psnr_swap = psnr_of(&w_swap, ops, noise, px, n_eval, seed);
    let psnr_sup = psnr_of(&w_sup, ops, noise, px, n_eval, seed);
    Ok(OracleReport {
        param_dist: (&w_swap - &w_sup).norm() / w_sup.norm(),
        psnr_gap: (psnr_swap - psnr_sup).abs(),
        psnr_swap,
        psnr_sup,
        w_swap,
        w_sup,
        q,
    })
}

#[derive(Clone, Debug)]
pub struct EigenspaceReport {
    pub rank: usize,
    pub null_dim: usize,
    /// `‖P_R(W_swap − W_sup)P_R‖ / ‖P_R W_sup P_R‖`.
    pub range_rel: f64,
    /// `‖P_N(W_swap − W_sup)P_R‖ / ‖P_N W_sup P_R‖`; zero when the
    /// supervised map has no null-space component.
    pub null_rel: f64,
    pub null_norm_swap: f64,
    pub null_norm_sup: f64,
}

impl fmt::Display for EigenspaceReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "eigenspaces of Q (rank {}, null {}): range rel. diff {:.3e}, null rel. diff {:.3e} (|P_N W P_R|: swap {:.3e}, supervised {:.3e})",
            self.rank, self.null_dim, self.range_rel, self.null_rel, self.null_norm_swap, self.null_norm_sup
        )
    }
}

/// Fits both estimators without the rank check and compares them on the
/// range and null space of `Q`.
pub fn eigenspace_comparison(
    ops: &OperatorSet,
    noise: GaussianNoise,
    px: &GaussianImages,
    n_train: usize,
    seed: u64,
) -> Result<EigenspaceReport> {
    check_inputs(ops, px, n_train)?;
    if ops.dim() > MAX_ORACLE_DIM {
        return Err(Error::SizeLimit(format!(
            "eigenspace comparison supports N <= {MAX_ORACLE_DIM}, got {}",
            ops.dim()
        )));
    }
    let q = ops.gram();
    let report = q_rank_report(&q, ORACLE_RANK_THRESHOLD)?;
    let eig = SymmetricEigen::new(q);
    let lambda_max = eig.eigenvalues.max();
    let dim = ops.dim();
    let mut p_range = DMatrix::zeros(dim, dim);
    for (i, &l) in eig.eigenvalues.iter().enumerate() {
        if l > ORACLE_RANK_THRESHOLD * lambda_max {
            let v = eig.eigenvectors.column(i);
            p_range += v * v.transpose();
        }
    }
    let p_null = DMatrix::identity(dim, dim) - &p_range;
    let m = accumulate(ops, noise, px, n_train, seed);
    let w_swap = solve_swap(ops, &m);
    let w_sup = solve_supervised(&m);
    let diff = &w_swap - &w_sup;
    let range_sup = (&p_range * &w_sup * &p_range).norm();
    let null_sup = (&p_null * &w_sup * &p_range).norm();
    Ok(EigenspaceReport {
        rank: report.rank,
        null_dim: report.null_dim(),
        range_rel: (&p_range * &diff * &p_range).norm() / range_sup,
        null_rel: if null_sup > 0.0 {
            (&p_null * &diff * &p_range).norm() / null_sup
        } else {
            0.0
        },
        null_norm_swap: (&p_null * &w_swap * &p_range).norm(),
        null_norm_sup: null_sup,
    })
}

#[derive(Clone, Debug)]
pub struct FloorReport {
    pub n: usize,
    /// Swap loss of the best linear estimator fitted on the same draws.
    pub min_loss: f64,
    pub se: f64,
    /// `2σ²E[M]`.
    pub floor: f64,
    pub within: bool,
    pub above_lower: bool,
}

impl FloorReport {
    /// `(min_loss − floor) / se`.
    pub fn z_score(&self) -> f64 {
        (self.min_loss - self.floor) / self.se
    }
}

impl fmt::Display for FloorReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "noise floor (n={}): min swap loss {:.6} (s.e. {:.2e}) vs 2σ²E[M] = {:.6}, {:+.1} s.e.",
            self.n,
            self.min_loss,
            self.se,
            self.floor,
            self.z_score()
        )
    }
}

/// Empirical minimum of the swap loss over linear estimators versus the
/// noise floor `2σ²E[M]`.
pub fn noise_floor_check(
    ops: &OperatorSet,
    noise: GaussianNoise,
    px: &GaussianImages,
    n: usize,
    seed: u64,
) -> Result<FloorReport> {
    check_inputs(ops, px, n)?;
    if ops.dim() > MAX_ORACLE_DIM {
        return Err(Error::SizeLimit(format!(
            "noise floor check supports N <= {MAX_ORACLE_DIM}, got {}",
            ops.dim()
        )));
    }
    let m = accumulate(ops, noise, px, n, seed);
    let w = solve_swap(ops, &m);
    let (mut sum, mut sum_sq) = (0.0, 0.0);
    for_each_draw(ops, noise, px, n, seed, "theory-fit", |d| {
        let v = swap_integrand(&w, ops, d);
        sum += v;
        sum_sq += v * v;
    });
    let (min_loss, se) = mean_and_se(sum, sum_sq, n);
    let floor = ops.noise_floor(noise);
    Ok(FloorReport {
        n,
        min_loss,
        se,
        floor,
        within: (min_loss - floor).abs() <= 3.0 * se,
        above_lower: min_loss >= floor - 3.0 * se,
    })
}
