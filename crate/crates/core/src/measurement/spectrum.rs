use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use super::ConvolutionOp;
use crate::error::{Error, Result};

/// DFT magnitudes of kernels zero-padded to a common `h×w` grid.
#[derive(Clone, Debug)]
pub struct KernelSpectrum {
    pub size: (usize, usize),
    pub per_kernel: Vec<Vec<f64>>,
    pub mean: Vec<f64>,
}

impl KernelSpectrum {
    pub fn min_over_max(&self) -> f64 {
        let max = self.mean.iter().copied().fold(f64::MIN, f64::max);
        let min = self.mean.iter().copied().fold(f64::MAX, f64::min);
        min / max
    }
}

pub fn kernel_spectrum(kernels: &[ConvolutionOp], size: (usize, usize)) -> Result<KernelSpectrum> {
    if kernels.is_empty() {
        return Err(Error::InvalidArgument("kernel spectrum of an empty set".into()));
    }
    let (h, w) = size;
    let mut planner = FftPlanner::<f64>::new();
    let row_fft = planner.plan_fft_forward(w);
    let col_fft = planner.plan_fft_forward(h);
    let mut per_kernel = Vec::with_capacity(kernels.len());
    let mut mean = vec![0.0; h * w];
    let mut col = vec![Complex::default(); h];
    for k in kernels {
        let (kh, kw) = k.size();
        if kh > h || kw > w {
            return Err(Error::KernelTooLarge {
                kernel: vec![kh, kw],
                input: vec![h, w],
            });
        }
        let mut buf = vec![Complex::default(); h * w];
        for a in 0..kh {
            for b in 0..kw {
                buf[a * w + b] = Complex::new(k.kernel()[a * kw + b], 0.0);
            }
        }
        for row in buf.chunks_mut(w) {
            row_fft.process(row);
        }
        for c in 0..w {
            for r in 0..h {
                col[r] = buf[r * w + c];
            }
            col_fft.process(&mut col);
            for r in 0..h {
                buf[r * w + c] = col[r];
            }
        }
        let mag: Vec<f64> = buf.iter().map(|z| z.norm()).collect();
        for (m, v) in mean.iter_mut().zip(&mag) {
            *m += v;
        }
        per_kernel.push(mag);
    }
    mean.iter_mut().for_each(|m| *m /= kernels.len() as f64);
    Ok(KernelSpectrum {
        size,
        per_kernel,
        mean,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::measurement::Boundary;

    #[test]
    fn delta_has_flat_spectrum() {
        let s = kernel_spectrum(&[ConvolutionOp::delta(5, Boundary::Zero)], (8, 8)).unwrap();
        assert!(s.mean.iter().all(|v| (v - 1.0).abs() < 1e-12));
    }

    #[test]
    fn box_kernel_matches_closed_form() {
        let k = ConvolutionOp::new(vec![0.5, 0.5], 1, 2, Boundary::Zero).unwrap();
        let s = kernel_spectrum(&[k], (1, 8)).unwrap();
        for (i, v) in s.mean.iter().enumerate() {
            let expected = (std::f64::consts::PI * i as f64 / 8.0).cos().abs();
            assert!((v - expected).abs() < 1e-12, "bin {i}: {v} vs {expected}");
        }
        assert!(s.mean[4] < 1e-15);
    }

    #[test]
    fn rejects_empty_and_oversized() {
        assert!(kernel_spectrum(&[], (8, 8)).is_err());
        assert!(kernel_spectrum(&[ConvolutionOp::delta(5, Boundary::Zero)], (4, 8)).is_err());
    }
}
