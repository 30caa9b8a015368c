use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::Rng;

use super::{MeasurementOp, ParamDistribution};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Largest image dimension `N` for which `Q` is materialised.
pub const MAX_GRAM_DIM: usize = 4096;

fn check_dim(image: (usize, usize)) -> Result<usize> {
    let n = image.0 * image.1;
    if n > MAX_GRAM_DIM {
        return Err(Error::SizeLimit(format!(
            "Q would be {n}x{n}; explicit Gram matrices are limited to N <= {MAX_GRAM_DIM}"
        )));
    }
    Ok(n)
}

/// `(1/n) Σ θᵢᵀθᵢ` over the given operators.
pub fn gram_from_ops(ops: &[MeasurementOp], image: (usize, usize)) -> Result<DMatrix<f64>> {
    let n = check_dim(image)?;
    if ops.is_empty() {
        return Err(Error::InvalidArgument("no operators to average".into()));
    }
    let mut q = DMatrix::<f64>::zeros(n, n);
    for op in ops {
        for row in op.sparse_rows(image)? {
            for &(i, a) in &row {
                for &(j, b) in &row {
                    q[(i, j)] += a * b;
                }
            }
        }
    }
    q /= ops.len() as f64;
    Ok(q)
}

/// Monte-Carlo estimate of `Q = E[θᵀθ]` from `n_samples` draws.
pub fn gram_expectation(
    dist: &ParamDistribution,
    n_samples: usize,
    image: (usize, usize),
    rng: &mut impl Rng,
) -> Result<DMatrix<f64>> {
    check_dim(image)?;
    let ops = (0..n_samples).map(|_| dist.sample(rng)).collect::<Result<Vec<_>>>()?;
    gram_from_ops(&ops, image)
}

/// Exact `Q` over the distribution's finite support, if it has one.
pub fn gram_exact(dist: &ParamDistribution, image: (usize, usize)) -> Result<Option<DMatrix<f64>>> {
    match dist.support() {
        Some(ops) => gram_from_ops(&ops, image).map(Some),
        None => Ok(None),
    }
}

#[derive(Clone, Debug)]
pub struct QRankReport {
    pub rank: usize,
    /// Eigenvalues, descending.
    pub eigenvalues: Vec<f64>,
    pub full_rank: bool,
}

impl QRankReport {
    pub fn null_dim(&self) -> usize {
        self.eigenvalues.len() - self.rank
    }
}

pub const SYMMETRY_TOL: f64 = 1e-8;

/// Eigen-spectrum of a symmetric `Q`; the rank counts eigenvalues above
/// `threshold · λ_max`.
pub fn q_rank_report(q: &DMatrix<f64>, threshold: f64) -> Result<QRankReport> {
    if q.nrows() != q.ncols() {
        return Err(Error::shape("q_rank_report", &[q.nrows()], &[q.ncols()]));
    }
    let asym = (q - q.transpose()).amax();
    if asym > SYMMETRY_TOL {
        return Err(Error::NotSymmetric(asym));
    }
    let mut eigenvalues: Vec<f64> = SymmetricEigen::new(q.clone()).eigenvalues.iter().copied().collect();
    eigenvalues.sort_by(|a, b| b.total_cmp(a));
    let cut = threshold * eigenvalues.first().copied().unwrap_or(0.0).max(0.0);
    let rank = eigenvalues.iter().filter(|&&l| l > cut && l > 0.0).count();
    Ok(QRankReport {
        rank,
        full_rank: rank == eigenvalues.len(),
        eigenvalues,
    })
}

/// `λ_min(Q)` without forming `Q`, by power iteration on `λ_max·I − Q` with
/// `Q` applied through the sampled operators.
pub fn min_eigenvalue_matrix_free(
    ops: &[MeasurementOp],
    image: (usize, usize),
    iters: usize,
    rng: &mut impl Rng,
) -> Result<f64> {
    if ops.is_empty() {
        return Err(Error::InvalidArgument("no operators to average".into()));
    }
    let n = image.0 * image.1;
    let apply_q = |v: &DVector<f64>| -> Result<DVector<f64>> {
        let x = Tensor::new(&[image.0, image.1], v.as_slice().to_vec())?;
        let mut acc = DVector::zeros(n);
        for op in ops {
            let back = op.adjoint(&op.apply(&x)?)?;
            acc += DVector::from_column_slice(back.data());
        }
        Ok(acc / ops.len() as f64)
    };
    let power = |shift: f64, rng: &mut dyn rand::RngCore| -> Result<f64> {
        let mut v = DVector::from_fn(n, |_, _| rng.random::<f64>() - 0.5);
        v.normalize_mut();
        let mut lambda = 0.0;
        for _ in 0..iters {
            let w = shift * &v - apply_q(&v)?;
            lambda = v.dot(&w);
            let norm = w.norm();
            if norm == 0.0 {
                break;
            }
            v = w / norm;
        }
        Ok(lambda)
    };
    let lambda_max = -power(0.0, rng)?;
    Ok(lambda_max - power(lambda_max, rng)?)
}

#[cfg(test)]
mod tests {
    use std::sync::Arc;

    use super::*;
    use crate::measurement::{Boundary, CompressivePatchOp, MotionKernels, SensingMatrix};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn full_orthonormal_operator_gives_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let phi = Arc::new(SensingMatrix::random_orthonormal(16, 4, &mut rng).unwrap());
        let op: MeasurementOp = CompressivePatchOp::new(phi, (0, 0), (8, 8)).unwrap().into();
        let q = gram_exact(&ParamDistribution::Fixed(op), (8, 8)).unwrap().unwrap();
        assert!((q - DMatrix::<f64>::identity(64, 64)).amax() < 1e-12);
    }

    #[test]
    fn rank_report_on_simple_matrices() {
        let r = q_rank_report(&DMatrix::identity(5, 5), 1e-8).unwrap();
        assert_eq!((r.rank, r.full_rank), (5, true));
        let r = q_rank_report(&DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 1.0, 0.0])), 1e-8).unwrap();
        assert_eq!((r.rank, r.full_rank, r.null_dim()), (2, false, 1));
        let mut m = DMatrix::<f64>::identity(2, 2);
        m[(0, 1)] = 1e-6;
        assert!(matches!(q_rank_report(&m, 1e-8), Err(Error::NotSymmetric(_))));
    }

    #[test]
    fn size_limit_is_explicit() {
        let dist = ParamDistribution::MotionKernels(MotionKernels::new(5, Boundary::Zero));
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(gram_expectation(&dist, 1, (65, 64), &mut rng), Err(Error::SizeLimit(_))));
    }

    #[test]
    fn matrix_free_minimum_matches_dense() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let gen = MotionKernels::new(3, Boundary::Circular);
        let ops: Vec<MeasurementOp> = (0..20).map(|_| gen.sample(&mut rng).into()).collect();
        let q = gram_from_ops(&ops, (6, 6)).unwrap();
        let dense = *q_rank_report(&q, 0.0).unwrap().eigenvalues.last().unwrap();
        let free = min_eigenvalue_matrix_free(&ops, (6, 6), 3000, &mut rng).unwrap();
        assert!((dense - free).abs() < 1e-3, "{dense} vs {free}");
    }
}
