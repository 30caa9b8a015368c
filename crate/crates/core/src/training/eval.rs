use super::task::{EvalSet, Task};
use crate::error::{Error, Result};
use crate::measurement::MeasurementOp;
use crate::models::Model;
use crate::tensor::Tensor;

pub const PSNR_CAP: f64 = 99.0;

/// `10·log10(1 / MSE)` for intensities in `[0, 1]`, capped at 99 dB.
pub fn psnr(pred: &[f32], truth: &[f32]) -> f64 {
    assert_eq!(pred.len(), truth.len(), "psnr of unequal lengths");
    let mse = pred
        .iter()
        .zip(truth)
        .map(|(&a, &b)| (a as f64 - b as f64).powi(2))
        .sum::<f64>()
        / pred.len() as f64;
    psnr_from_mse(mse)
}

pub fn psnr_from_mse(mse: f64) -> f64 {
    if mse <= 0.0 {
        return PSNR_CAP;
    }
    (10.0 * (1.0 / mse).log10()).min(PSNR_CAP)
}

#[derive(Clone, Debug)]
pub struct EvalReport {
    pub per_image: Vec<f64>,
    pub mean: f64,
    pub reconstructions: Vec<Tensor<f32>>,
}

/// Pixels scored for an image: the interior for deblurring, the covered
/// region for compressive sensing.
fn scored(task: &Task, op: &MeasurementOp, img: &Tensor<f32>) -> Vec<f32> {
    let (h, w) = (img.shape()[0], img.shape()[1]);
    let ((r0, r1), (c0, c1)) = match op {
        MeasurementOp::Compressive(cs) => cs.partition().coverage(),
        MeasurementOp::Convolution(_) => {
            let m = task.margin();
            ((m, h - m), (m, w - m))
        }
    };
    (r0..r1).flat_map(|r| (c0..c1).map(move |c| img.data()[r * w + c])).collect()
}

/// Reconstructs every evaluation image and scores it against its ground
/// truth.
pub fn evaluate(model: &Model<f32>, task: &Task, set: &EvalSet) -> Result<EvalReport> {
    if set.is_empty() {
        return Err(Error::MissingGroundTruth("empty evaluation set".into()));
    }
    let mut per_image = Vec::with_capacity(set.len());
    let mut reconstructions = Vec::with_capacity(set.len());
    for (x, (op, y)) in set.images.iter().zip(&set.measurements) {
        let out = model.predict(&task.network_input(op, y)?)?;
        let img = task.assemble(op, &out)?;
        per_image.push(psnr(&scored(task, op, &img), &scored(task, op, x)));
        reconstructions.push(img);
    }
    let mean = per_image.iter().sum::<f64>() / per_image.len() as f64;
    Ok(EvalReport {
        per_image,
        mean,
        reconstructions,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn psnr_values() {
        assert_eq!(psnr(&[0.5, 0.5], &[0.5, 0.5]), PSNR_CAP);
        assert!((psnr_from_mse(0.01) - 20.0).abs() < 1e-12);
        let v = psnr(&[0.0; 4], &[0.5; 4]);
        assert!((v - 6.020_599_913_279_624).abs() < 1e-9, "{v}");
    }
}
