//! Piecewise-constant synthetic images in `[0, 1]`.

use rand::Rng;

use crate::rng::stream;
use crate::tensor::Tensor;

/// A constant background overlaid with 3–6 axis-aligned rectangles and
/// discs, each of constant intensity.
pub fn piecewise_constant(h: usize, w: usize, rng: &mut impl Rng) -> Tensor<f32> {
    let mut img = vec![rng.random::<f32>(); h * w];
    let shapes = rng.random_range(3..=6);
    for _ in 0..shapes {
        let value = rng.random::<f32>();
        if rng.random_bool(0.5) {
            let (r0, c0) = (rng.random_range(0..h), rng.random_range(0..w));
            let (rh, rw) = (rng.random_range(h / 8..=h / 2).max(1), rng.random_range(w / 8..=w / 2).max(1));
            for r in r0..(r0 + rh).min(h) {
                img[r * w + c0..(c0 + rw).min(w) + r * w].fill(value);
            }
        } else {
            let (cy, cx) = (rng.random_range(0.0..h as f32), rng.random_range(0.0..w as f32));
            let rad = rng.random_range(h.min(w) as f32 / 10.0..h.min(w) as f32 / 3.0);
            for r in 0..h {
                for c in 0..w {
                    let (dy, dx) = (r as f32 + 0.5 - cy, c as f32 + 0.5 - cx);
                    if dy * dy + dx * dx <= rad * rad {
                        img[r * w + c] = value;
                    }
                }
            }
        }
    }
    Tensor::new(&[h, w], img).expect("consistent shape")
}

/// `count` images from the named stream of `seed`.
pub fn image_set(count: usize, h: usize, w: usize, seed: u64, purpose: &str) -> Vec<Tensor<f32>> {
    (0..count)
        .map(|i| piecewise_constant(h, w, &mut stream(seed, purpose, i as u64)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn images_are_in_range_and_reproducible() {
        let a = image_set(8, 32, 32, 1, "train");
        assert_eq!(a, image_set(8, 32, 32, 1, "train"));
        assert_ne!(a, image_set(8, 32, 32, 1, "val"));
        for img in &a {
            assert!(img.data().iter().all(|v| (0.0..=1.0).contains(v)));
            let mut distinct: Vec<f32> = img.data().to_vec();
            distinct.sort_by(f32::total_cmp);
            distinct.dedup();
            assert!(distinct.len() <= 7);
        }
    }
}
