use std::f64::consts::PI;

use rand::Rng;

use super::blur::{Boundary, ConvolutionOp};

/// Random-walk motion blur kernels: a walk of `length ~ U{0..max_length}`
/// unit steps whose heading turns by at most `max_turn` per step, splatted
/// bilinearly into a `size×size` grid with its centroid at the centre.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MotionKernels {
    pub size: usize,
    pub max_length: usize,
    pub max_turn: f64,
    pub boundary: Boundary,
}

/// Sub-steps per unit of trajectory length when rasterising.
const SUBSTEPS: usize = 8;

impl MotionKernels {
    pub fn new(size: usize, boundary: Boundary) -> Self {
        MotionKernels {
            size,
            max_length: size.saturating_sub(1),
            max_turn: PI / 3.0,
            boundary,
        }
    }

    pub fn sample(&self, rng: &mut impl Rng) -> ConvolutionOp {
        loop {
            let length = rng.random_range(0..=self.max_length);
            let mut heading = rng.random_range(0.0..2.0 * PI);
            let mut pts = vec![(0.0f64, 0.0f64)];
            for _ in 0..length {
                let &(y, x) = pts.last().expect("non-empty");
                pts.push((y + heading.sin(), x + heading.cos()));
                heading += rng.random_range(-self.max_turn..=self.max_turn);
            }
            if let Some(op) = self.rasterize(&pts) {
                return op;
            }
        }
    }

    /// Kernel for an explicit trajectory; `None` when it does not fit.
    pub fn rasterize(&self, walk: &[(f64, f64)]) -> Option<ConvolutionOp> {
        let k = self.size;
        if walk.len() <= 1 {
            return Some(ConvolutionOp::delta(k, self.boundary));
        }
        let mut samples = Vec::with_capacity((walk.len() - 1) * SUBSTEPS + 1);
        for seg in walk.windows(2) {
            for s in 0..SUBSTEPS {
                let t = s as f64 / SUBSTEPS as f64;
                samples.push((
                    seg[0].0 + t * (seg[1].0 - seg[0].0),
                    seg[0].1 + t * (seg[1].1 - seg[0].1),
                ));
            }
        }
        samples.push(*walk.last().expect("non-empty"));

        let n = samples.len() as f64;
        let cy = samples.iter().map(|p| p.0).sum::<f64>() / n;
        let cx = samples.iter().map(|p| p.1).sum::<f64>() / n;
        let centre = (k / 2) as f64;
        let limit = (k - 1) as f64 + 1e-9;

        let mut kernel = vec![0.0; k * k];
        for (y, x) in samples {
            let (y, x) = (y - cy + centre, x - cx + centre);
            if y < -1e-9 || x < -1e-9 || y > limit || x > limit {
                return None;
            }
            let (y, x) = (y.clamp(0.0, (k - 1) as f64), x.clamp(0.0, (k - 1) as f64));
            let (y0, x0) = (y.floor() as usize, x.floor() as usize);
            let (fy, fx) = (y - y0 as f64, x - x0 as f64);
            for (dy, wy) in [(0, 1.0 - fy), (1, fy)] {
                for (dx, wx) in [(0, 1.0 - fx), (1, fx)] {
                    let w = wy * wx;
                    if w > 0.0 {
                        kernel[(y0 + dy) * k + x0 + dx] += w;
                    }
                }
            }
        }
        let total: f64 = kernel.iter().sum();
        kernel.iter_mut().for_each(|v| *v /= total);
        ConvolutionOp::new(kernel, k, k, self.boundary).ok()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn empty_walk_is_a_delta() {
        let gen = MotionKernels::new(5, Boundary::Zero);
        assert_eq!(gen.rasterize(&[(0.3, 0.7)]).unwrap(), ConvolutionOp::delta(5, Boundary::Zero));
    }

    #[test]
    fn samples_are_normalised_and_reproducible() {
        let gen = MotionKernels::new(5, Boundary::Zero);
        let mut a = ChaCha8Rng::seed_from_u64(9);
        let mut b = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..500 {
            let k = gen.sample(&mut a);
            assert_eq!(k, gen.sample(&mut b));
            assert!(k.kernel().iter().all(|&v| v >= 0.0));
            assert!((k.kernel().iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn straight_walk_spreads_along_its_axis() {
        let gen = MotionKernels::new(5, Boundary::Zero);
        let walk: Vec<_> = (0..5).map(|i| (0.0, i as f64)).collect();
        let k = gen.rasterize(&walk).unwrap();
        let row: f64 = k.kernel()[10..15].iter().sum();
        assert!((row - 1.0).abs() < 1e-12);
        assert!(gen.rasterize(&(0..7).map(|i| (0.0, i as f64)).collect::<Vec<_>>()).is_none());
    }
}
