use std::sync::Arc;

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// `m × p²` measurement matrix with orthonormal rows, applied to every
/// `p×p` patch (flattened row-major).
#[derive(Clone, Debug, PartialEq)]
pub struct SensingMatrix {
    rows: usize,
    patch: usize,
    data: Vec<f64>,
}

pub const ORTHONORMAL_TOL: f64 = 1e-6;

impl SensingMatrix {
    /// Orthonormal rows from the QR factorisation of a Gaussian matrix.
    pub fn random_orthonormal(rows: usize, patch: usize, rng: &mut impl Rng) -> Result<Self> {
        let dim = patch * patch;
        if rows == 0 || rows > dim {
            return Err(Error::InvalidArgument(format!(
                "sensing matrix needs 1 <= m <= p^2, got m={rows}, p={patch}"
            )));
        }
        let g = DMatrix::<f64>::from_fn(dim, rows, |_, _| rng.sample(StandardNormal));
        let q = g.qr().q();
        let mut data = Vec::with_capacity(rows * dim);
        for r in 0..rows {
            data.extend(q.column(r).iter().copied());
        }
        Self::from_rows(rows, patch, data)
    }

    /// Measurement count for a compression ratio `m / p²`, at least 1.
    pub fn rows_for_ratio(patch: usize, ratio: f64) -> usize {
        ((ratio * (patch * patch) as f64).round() as usize).clamp(1, patch * patch)
    }

    pub fn identity(patch: usize) -> Self {
        let dim = patch * patch;
        let mut data = vec![0.0; dim * dim];
        for i in 0..dim {
            data[i * dim + i] = 1.0;
        }
        SensingMatrix {
            rows: dim,
            patch,
            data,
        }
    }

    pub fn from_rows(rows: usize, patch: usize, data: Vec<f64>) -> Result<Self> {
        let dim = patch * patch;
        if rows == 0 || rows > dim || data.len() != rows * dim {
            return Err(Error::InvalidArgument(format!(
                "sensing matrix {rows}x{dim} cannot hold {} values",
                data.len()
            )));
        }
        let m = SensingMatrix { rows, patch, data };
        let err = m.orthonormality_error();
        if err > ORTHONORMAL_TOL {
            return Err(Error::InvalidArgument(format!(
                "sensing matrix rows are not orthonormal (max |ΦΦᵀ - I| = {err:e})"
            )));
        }
        Ok(m)
    }

    /// `max |ΦΦᵀ − I|`.
    pub fn orthonormality_error(&self) -> f64 {
        let dim = self.dim();
        let mut worst = 0.0f64;
        for i in 0..self.rows {
            for j in 0..self.rows {
                let dot: f64 = (0..dim).map(|c| self.data[i * dim + c] * self.data[j * dim + c]).sum();
                let target = if i == j { 1.0 } else { 0.0 };
                worst = worst.max((dot - target).abs());
            }
        }
        worst
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn patch(&self) -> usize {
        self.patch
    }

    /// Patch dimension `p²`.
    pub fn dim(&self) -> usize {
        self.patch * self.patch
    }

    pub fn ratio(&self) -> f64 {
        self.rows as f64 / self.dim() as f64
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// `Φ` as an `[m, p²]` tensor.
    pub fn to_tensor<T: Real>(&self) -> Tensor<T> {
        Tensor::from_f64(&[self.rows, self.dim()], &self.data).expect("consistent shape")
    }

    /// `Φᵀ` as a `[p², m]` tensor.
    pub fn transposed<T: Real>(&self) -> Tensor<T> {
        let dim = self.dim();
        let mut t = vec![T::zero(); self.data.len()];
        for r in 0..self.rows {
            for c in 0..dim {
                t[c * self.rows + r] = T::of(self.data[r * dim + c]);
            }
        }
        Tensor::new(&[dim, self.rows], t).expect("consistent shape")
    }

    fn project<T: Real>(&self, patch: &[T], out: &mut [T]) {
        let dim = self.dim();
        for (r, o) in out.iter_mut().enumerate() {
            *o = self.data[r * dim..(r + 1) * dim]
                .iter()
                .zip(patch)
                .map(|(&a, &b)| T::of(a) * b)
                .sum();
        }
    }

    fn back_project<T: Real>(&self, y: &[T], out: &mut [T]) {
        let dim = self.dim();
        out.iter_mut().for_each(|v| *v = T::zero());
        for (r, &yr) in y.iter().enumerate() {
            for (c, o) in out.iter_mut().enumerate() {
                *o += T::of(self.data[r * dim + c]) * yr;
            }
        }
    }
}

/// Tiling of an image by non-overlapping `p×p` patches starting at `offset`;
/// the remainder strips at the far edges are left uncovered.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Partition {
    pub patch: usize,
    pub offset: (usize, usize),
    pub image: (usize, usize),
}

impl Partition {
    pub fn new(patch: usize, offset: (usize, usize), image: (usize, usize)) -> Result<Self> {
        if patch == 0 || offset.0 >= patch || offset.1 >= patch {
            return Err(Error::InvalidArgument(format!(
                "partition offset {offset:?} must lie in [0, {patch})^2"
            )));
        }
        if image.0 < offset.0 + patch || image.1 < offset.1 + patch {
            return Err(Error::InvalidArgument(format!(
                "image {image:?} cannot host a {patch}x{patch} patch at offset {offset:?}"
            )));
        }
        Ok(Partition { patch, offset, image })
    }

    pub fn grid(&self) -> (usize, usize) {
        (
            (self.image.0 - self.offset.0) / self.patch,
            (self.image.1 - self.offset.1) / self.patch,
        )
    }

    pub fn len(&self) -> usize {
        let (r, c) = self.grid();
        r * c
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Top-left pixel of patch `i` (row-major over the grid).
    pub fn origin(&self, i: usize) -> (usize, usize) {
        let cols = self.grid().1;
        (
            self.offset.0 + (i / cols) * self.patch,
            self.offset.1 + (i % cols) * self.patch,
        )
    }

    /// Flat pixel indices of every patch, `len() · p²` entries, patch-major.
    pub fn pixel_indices(&self) -> Vec<usize> {
        let p = self.patch;
        let w = self.image.1;
        let mut idx = Vec::with_capacity(self.len() * p * p);
        for i in 0..self.len() {
            let (r0, c0) = self.origin(i);
            for r in 0..p {
                for c in 0..p {
                    idx.push((r0 + r) * w + c0 + c);
                }
            }
        }
        idx
    }

    /// Half-open pixel rectangle `(rows, cols)` covered by the tiling.
    pub fn coverage(&self) -> ((usize, usize), (usize, usize)) {
        let (gr, gc) = self.grid();
        (
            (self.offset.0, self.offset.0 + gr * self.patch),
            (self.offset.1, self.offset.1 + gc * self.patch),
        )
    }

    /// Indices of this partition's patches lying entirely inside `other`'s
    /// coverage.
    pub fn patches_covered_by(&self, other: &Partition) -> Vec<usize> {
        let ((r0, r1), (c0, c1)) = other.coverage();
        (0..self.len())
            .filter(|&i| {
                let (y, x) = self.origin(i);
                y >= r0 && y + self.patch <= r1 && x >= c0 && x + self.patch <= c1
            })
            .collect()
    }
}

/// Two distinct partition offsets drawn uniformly from `[0, p)²`.
pub fn shifted_partitions(
    image: (usize, usize),
    patch: usize,
    rng: &mut impl Rng,
) -> Result<((usize, usize), (usize, usize))> {
    if patch < 2 {
        return Err(Error::InvalidArgument("patch size 1 admits a single offset".into()));
    }
    if image.0 < 2 * patch || image.1 < 2 * patch {
        return Err(Error::InvalidArgument(format!(
            "image {image:?} too small for shifted {patch}x{patch} partitions (need >= {0}x{0})",
            2 * patch
        )));
    }
    let draw = |rng: &mut dyn rand::RngCore| (rng.random_range(0..patch), rng.random_range(0..patch));
    let first = draw(rng);
    loop {
        let second = draw(rng);
        if second != first {
            return Ok((first, second));
        }
    }
}

/// Patch-wise compressive measurement `θ`: every patch of a partition is
/// projected by the same orthonormal matrix. Measurements have shape
/// `[patches, m]`.
#[derive(Clone, Debug)]
pub struct CompressivePatchOp {
    phi: Arc<SensingMatrix>,
    partition: Partition,
}

impl PartialEq for CompressivePatchOp {
    fn eq(&self, other: &Self) -> bool {
        self.partition == other.partition && (Arc::ptr_eq(&self.phi, &other.phi) || self.phi == other.phi)
    }
}

impl CompressivePatchOp {
    pub fn new(phi: Arc<SensingMatrix>, offset: (usize, usize), image: (usize, usize)) -> Result<Self> {
        let partition = Partition::new(phi.patch(), offset, image)?;
        Ok(CompressivePatchOp { phi, partition })
    }

    pub fn phi(&self) -> &Arc<SensingMatrix> {
        &self.phi
    }

    pub fn partition(&self) -> &Partition {
        &self.partition
    }

    pub fn offset(&self) -> (usize, usize) {
        self.partition.offset
    }

    pub fn image(&self) -> (usize, usize) {
        self.partition.image
    }

    pub fn measurement_shape(&self) -> [usize; 2] {
        [self.partition.len(), self.phi.rows()]
    }

    fn check_image<T: Real>(&self, x: &Tensor<T>) -> Result<()> {
        let (h, w) = self.partition.image;
        if x.shape() != [h, w] {
            return Err(Error::shape("compressive measurement", x.shape(), &[h, w]));
        }
        Ok(())
    }

    /// Patches of `x` as rows of a `[patches, p²]` tensor.
    pub fn extract_patches<T: Real>(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_image(x)?;
        let data = self.partition.pixel_indices().iter().map(|&i| x.data()[i]).collect();
        Tensor::new(&[self.partition.len(), self.phi.dim()], data)
    }

    /// Noiseless `θx`.
    pub fn apply<T: Real>(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let patches = self.extract_patches(x)?;
        let (n, m, d) = (self.partition.len(), self.phi.rows(), self.phi.dim());
        let mut y = vec![T::zero(); n * m];
        for i in 0..n {
            self.phi
                .project(&patches.data()[i * d..(i + 1) * d], &mut y[i * m..(i + 1) * m]);
        }
        Tensor::new(&[n, m], y)
    }

    fn check_measurement<T: Real>(&self, y: &Tensor<T>) -> Result<()> {
        if y.shape() != self.measurement_shape() {
            return Err(Error::shape("compressive adjoint", y.shape(), &self.measurement_shape()));
        }
        Ok(())
    }

    /// Per-patch `Φᵀy` as network input, shape `[patches, 1, p, p]`.
    pub fn patch_inputs<T: Real>(&self, y: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_measurement(y)?;
        let (n, m, d, p) = (self.partition.len(), self.phi.rows(), self.phi.dim(), self.phi.patch());
        let mut out = vec![T::zero(); n * d];
        for i in 0..n {
            self.phi
                .back_project(&y.data()[i * m..(i + 1) * m], &mut out[i * d..(i + 1) * d]);
        }
        Tensor::new(&[n, 1, p, p], out)
    }

    /// `θᵀy` on the full image grid; uncovered pixels are zero.
    pub fn adjoint<T: Real>(&self, y: &Tensor<T>) -> Result<Tensor<T>> {
        let patches = self.patch_inputs(y)?;
        let (h, w) = self.partition.image;
        let mut img = vec![T::zero(); h * w];
        for (&i, &v) in self.partition.pixel_indices().iter().zip(patches.data()) {
            img[i] += v;
        }
        Tensor::new(&[h, w], img)
    }

    /// Assembles `[patches, ...]` predictions (p² values each) into an image;
    /// uncovered pixels are zero.
    pub fn assemble<T: Real>(&self, patches: &Tensor<T>) -> Result<Tensor<T>> {
        let expected = self.partition.len() * self.phi.dim();
        if patches.numel() != expected {
            return Err(Error::shape("assemble", patches.shape(), &[self.partition.len(), self.phi.dim()]));
        }
        let (h, w) = self.partition.image;
        let mut img = vec![T::zero(); h * w];
        for (&i, &v) in self.partition.pixel_indices().iter().zip(patches.data()) {
            img[i] = v;
        }
        Tensor::new(&[h, w], img)
    }

    /// Sparse rows of the explicit `θ`: `(column, value)` pairs per row.
    pub fn sparse_rows(&self) -> Vec<Vec<(usize, f64)>> {
        let idx = self.partition.pixel_indices();
        let (d, m) = (self.phi.dim(), self.phi.rows());
        let mut rows = Vec::with_capacity(self.partition.len() * m);
        for i in 0..self.partition.len() {
            let cols = &idx[i * d..(i + 1) * d];
            for r in 0..m {
                rows.push(
                    cols.iter()
                        .zip(&self.phi.data()[r * d..(r + 1) * d])
                        .map(|(&c, &v)| (c, v))
                        .collect(),
                );
            }
        }
        rows
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn random_matrix_has_orthonormal_rows() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let phi = SensingMatrix::random_orthonormal(16, 8, &mut rng).unwrap();
        assert!(phi.orthonormality_error() < 1e-12);
        assert!(SensingMatrix::random_orthonormal(65, 8, &mut rng).is_err());
        assert!(SensingMatrix::from_rows(1, 2, vec![1.0, 1.0, 0.0, 0.0]).is_err());
    }

    #[test]
    fn single_row_projection_matches_hand_value() {
        let s = std::f64::consts::FRAC_1_SQRT_2;
        // Patch 1x2 flattened into a 2-vector needs p^2 = 2, which no square
        // patch provides; embed it in a 2x2 patch instead.
        let phi = Arc::new(SensingMatrix::from_rows(1, 2, vec![s, s, 0.0, 0.0]).unwrap());
        let op = CompressivePatchOp::new(phi, (0, 0), (2, 2)).unwrap();
        let x = Tensor::<f64>::from_f64(&[2, 2], &[1.0, 3.0, 0.0, 0.0]).unwrap();
        let y = op.apply(&x).unwrap();
        assert!((y.data()[0] - 2.828_427_124_746_19).abs() < 1e-12);
    }

    #[test]
    fn identity_operator_round_trips() {
        let phi = Arc::new(SensingMatrix::identity(2));
        let op = CompressivePatchOp::new(phi, (0, 0), (4, 4)).unwrap();
        let x = Tensor::<f64>::new(&[4, 4], (0..16).map(f64::from).collect()).unwrap();
        let y = op.apply(&x).unwrap();
        assert_eq!(op.adjoint(&y).unwrap(), x);
    }

    #[test]
    fn partition_counts() {
        let p = Partition::new(4, (1, 3), (12, 12)).unwrap();
        assert_eq!(p.grid(), (2, 2));
        assert_eq!(p.len(), 4);
        assert!(Partition::new(4, (4, 0), (12, 12)).is_err());
    }

    #[test]
    fn partitions_tile_without_overlap() {
        for offset in [(0, 0), (2, 2)] {
            let p = Partition::new(4, offset, (12, 12)).unwrap();
            let mut hits = vec![0; 144];
            for i in p.pixel_indices() {
                hits[i] += 1;
            }
            let ((r0, r1), (c0, c1)) = p.coverage();
            for r in 0..12 {
                for c in 0..12 {
                    let inside = (r0..r1).contains(&r) && (c0..c1).contains(&c);
                    assert_eq!(hits[r * 12 + c], usize::from(inside));
                }
            }
        }
    }

    #[test]
    fn shifted_offsets_are_distinct_and_seeded() {
        let a = shifted_partitions((12, 12), 4, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = shifted_partitions((12, 12), 4, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.0, a.1);
        assert!(shifted_partitions((7, 12), 4, &mut ChaCha8Rng::seed_from_u64(9)).is_err());
    }

    #[test]
    fn covered_patches_lie_inside_other_partition() {
        let a = Partition::new(8, (1, 1), (32, 32)).unwrap();
        let b = Partition::new(8, (5, 3), (32, 32)).unwrap();
        let inside = b.patches_covered_by(&a);
        // b's rows start at 5, 13, 21; a covers rows [1, 25) so the last
        // patch row of b (21..29) is excluded. Same for columns 3, 11, 19.
        assert_eq!(inside.len(), 4);
        let full = Partition::new(8, (0, 0), (32, 32)).unwrap();
        assert_eq!(b.patches_covered_by(&full).len(), b.len());
    }
}
