use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Boundary handling of a blur operator.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Boundary {
    /// Pixels outside the image are zero; output has the input's size.
    Zero,
    /// Periodic wrap-around; the operator is circulant.
    Circular,
}

pub const KERNEL_SUM_TOL: f64 = 1e-6;

/// Blur by true convolution with a nonnegative kernel summing to 1. The
/// kernel centre sits at `(kh / 2, kw / 2)`.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvolutionOp {
    kernel: Vec<f64>,
    kh: usize,
    kw: usize,
    boundary: Boundary,
}

impl ConvolutionOp {
    pub fn new(kernel: Vec<f64>, kh: usize, kw: usize, boundary: Boundary) -> Result<Self> {
        if kh == 0 || kw == 0 || kernel.len() != kh * kw {
            return Err(Error::InvalidArgument(format!(
                "{kh}x{kw} kernel cannot hold {} values",
                kernel.len()
            )));
        }
        if let Some(v) = kernel.iter().find(|v| !v.is_finite() || **v < 0.0) {
            return Err(Error::InvalidArgument(format!("blur kernel entry {v} is negative or non-finite")));
        }
        let sum: f64 = kernel.iter().sum();
        if (sum - 1.0).abs() > KERNEL_SUM_TOL {
            return Err(Error::InvalidArgument(format!("blur kernel sums to {sum}, expected 1")));
        }
        Ok(ConvolutionOp {
            kernel,
            kh,
            kw,
            boundary,
        })
    }

    /// Kernel from a tensor of shape `[kh, kw]` (e.g. a network estimate).
    pub fn from_tensor<T: Real>(k: &Tensor<T>, boundary: Boundary) -> Result<Self> {
        let s = k.shape();
        if s.len() != 2 {
            return Err(Error::InvalidArgument(format!("kernel tensor must be 2-D, got {s:?}")));
        }
        Self::new(k.data().iter().map(|v| v.as_f64()).collect(), s[0], s[1], boundary)
    }

    pub fn delta(size: usize, boundary: Boundary) -> Self {
        let mut kernel = vec![0.0; size * size];
        kernel[(size / 2) * size + size / 2] = 1.0;
        ConvolutionOp {
            kernel,
            kh: size,
            kw: size,
            boundary,
        }
    }

    pub fn kernel(&self) -> &[f64] {
        &self.kernel
    }

    pub fn kernel_tensor<T: Real>(&self) -> Tensor<T> {
        Tensor::from_f64(&[self.kh, self.kw], &self.kernel).expect("consistent shape")
    }

    pub fn size(&self) -> (usize, usize) {
        (self.kh, self.kw)
    }

    pub fn boundary(&self) -> Boundary {
        self.boundary
    }

    pub fn with_boundary(mut self, boundary: Boundary) -> Self {
        self.boundary = boundary;
        self
    }

    /// Margin excluded by interior crops: the kernel radius.
    pub fn radius(&self) -> usize {
        self.kh.max(self.kw) / 2
    }

    fn dims<T: Real>(x: &Tensor<T>) -> Result<(usize, usize)> {
        match x.shape() {
            &[h, w] => Ok((h, w)),
            s => Err(Error::InvalidArgument(format!("blur expects a 2-D image, got {s:?}"))),
        }
    }

    /// Source pixel for output `(i, j)` and tap `(a, b)`, if any.
    fn source(&self, i: usize, j: usize, a: usize, b: usize, h: usize, w: usize) -> Option<usize> {
        let si = i as isize - a as isize + (self.kh / 2) as isize;
        let sj = j as isize - b as isize + (self.kw / 2) as isize;
        match self.boundary {
            Boundary::Zero => {
                (si >= 0 && sj >= 0 && si < h as isize && sj < w as isize).then(|| si as usize * w + sj as usize)
            }
            Boundary::Circular => {
                let si = si.rem_euclid(h as isize) as usize;
                let sj = sj.rem_euclid(w as isize) as usize;
                Some(si * w + sj)
            }
        }
    }

    /// Noiseless `θx`.
    pub fn apply<T: Real>(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let (h, w) = Self::dims(x)?;
        let mut y = vec![T::zero(); h * w];
        for i in 0..h {
            for j in 0..w {
                let mut acc = T::zero();
                for a in 0..self.kh {
                    for b in 0..self.kw {
                        if let Some(s) = self.source(i, j, a, b, h, w) {
                            acc += T::of(self.kernel[a * self.kw + b]) * x.data()[s];
                        }
                    }
                }
                y[i * w + j] = acc;
            }
        }
        Tensor::new(&[h, w], y)
    }

    /// `θᵀy`: correlation with the kernel, the exact adjoint of [`Self::apply`].
    pub fn adjoint<T: Real>(&self, y: &Tensor<T>) -> Result<Tensor<T>> {
        let (h, w) = Self::dims(y)?;
        let mut x = vec![T::zero(); h * w];
        for i in 0..h {
            for j in 0..w {
                let yv = y.data()[i * w + j];
                for a in 0..self.kh {
                    for b in 0..self.kw {
                        if let Some(s) = self.source(i, j, a, b, h, w) {
                            x[s] += T::of(self.kernel[a * self.kw + b]) * yv;
                        }
                    }
                }
            }
        }
        Tensor::new(&[h, w], x)
    }

    /// Sparse rows of the explicit `θ` on an `h×w` image.
    pub fn sparse_rows(&self, h: usize, w: usize) -> Vec<Vec<(usize, f64)>> {
        let mut rows = Vec::with_capacity(h * w);
        for i in 0..h {
            for j in 0..w {
                let mut row: Vec<(usize, f64)> = Vec::with_capacity(self.kh * self.kw);
                for a in 0..self.kh {
                    for b in 0..self.kw {
                        let v = self.kernel[a * self.kw + b];
                        if v == 0.0 {
                            continue;
                        }
                        if let Some(s) = self.source(i, j, a, b, h, w) {
                            // Taps can alias under wrap-around on tiny images.
                            match row.iter_mut().find(|(c, _)| *c == s) {
                                Some(entry) => entry.1 += v,
                                None => row.push((s, v)),
                            }
                        }
                    }
                }
                rows.push(row);
            }
        }
        rows
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_image(h: usize, w: usize, rng: &mut ChaCha8Rng) -> Tensor<f64> {
        Tensor::new(&[h, w], (0..h * w).map(|_| rng.random::<f64>()).collect()).unwrap()
    }

    fn random_kernel(k: usize, rng: &mut ChaCha8Rng, boundary: Boundary) -> ConvolutionOp {
        let raw: Vec<f64> = (0..k * k).map(|_| rng.random::<f64>()).collect();
        let s: f64 = raw.iter().sum();
        ConvolutionOp::new(raw.iter().map(|v| v / s).collect(), k, k, boundary).unwrap()
    }

    #[test]
    fn rejects_invalid_kernels() {
        assert!(ConvolutionOp::new(vec![0.5, 0.4], 1, 2, Boundary::Zero).is_err());
        assert!(ConvolutionOp::new(vec![1.5, -0.5], 1, 2, Boundary::Zero).is_err());
        assert!(ConvolutionOp::new(vec![1.0], 1, 2, Boundary::Zero).is_err());
    }

    #[test]
    fn delta_kernel_is_identity_both_ways() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random_image(7, 6, &mut rng);
        for b in [Boundary::Zero, Boundary::Circular] {
            let op = ConvolutionOp::delta(5, b);
            assert_eq!(op.apply(&x).unwrap(), x);
            assert_eq!(op.adjoint(&x).unwrap(), x);
        }
    }

    #[test]
    fn adjoint_identity_holds() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for b in [Boundary::Zero, Boundary::Circular] {
            let op = random_kernel(5, &mut rng, b);
            let x = random_image(9, 8, &mut rng);
            let y = random_image(9, 8, &mut rng);
            let lhs = op.apply(&x).unwrap().dot(&y).unwrap();
            let rhs = x.dot(&op.adjoint(&y).unwrap()).unwrap();
            assert!((lhs - rhs).abs() < 1e-12 * lhs.abs());
        }
    }

    #[test]
    fn constant_images_keep_their_mean_in_the_interior() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let op = random_kernel(5, &mut rng, Boundary::Zero);
        let x = Tensor::<f64>::full(&[12, 12], 0.3);
        let y = op.apply(&x).unwrap();
        let r = op.radius();
        for i in r..12 - r {
            for j in r..12 - r {
                assert!((y.data()[i * 12 + j] - 0.3).abs() < 1e-12);
            }
        }
        let circ = op.clone().with_boundary(Boundary::Circular).apply(&x).unwrap();
        assert!(circ.data().iter().all(|v| (v - 0.3).abs() < 1e-12));
    }

    #[test]
    fn agrees_with_tape_blur() {
        use crate::tensor::Tape;
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let op = random_kernel(3, &mut rng, Boundary::Zero);
        let x = random_image(6, 7, &mut rng);
        let tape = Tape::new();
        let xv = tape.constant(x.clone().reshape(&[1, 1, 6, 7]).unwrap());
        let kv = tape.constant(op.kernel_tensor::<f64>().reshape(&[1, 3, 3]).unwrap());
        let y = xv.blur(kv).unwrap().value();
        let direct = op.apply(&x).unwrap();
        for (a, b) in y.data().iter().zip(direct.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}
