//! Swap, self and proxy losses and their weighted combination. Every `ρ`
//! term is a mean over elements and batch.

use std::rc::Rc;

use crate::error::{Error, Result};
use crate::measurement::CompressivePatchOp;
use crate::tensor::{Real, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum LossKind {
    L2,
    L1,
}

impl LossKind {
    /// `ρ(diff)`: mean of squares or of absolute values.
    pub fn rho<'t, T: Real>(self, diff: Var<'t, T>) -> Var<'t, T> {
        match self {
            LossKind::L2 => diff.square().mean(),
            LossKind::L1 => diff.abs().mean(),
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "l2" => Ok(LossKind::L2),
            "l1" => Ok(LossKind::L1),
            _ => Err(Error::Config(format!("unknown loss norm {s:?} (expected l1 or l2)"))),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            LossKind::L2 => "l2",
            LossKind::L1 => "l1",
        }
    }
}

/// Weights of the self (`γ`), proxy-parameter (`α`) and proxy-image (`β`)
/// terms relative to the swap loss.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub gamma: f64,
    pub alpha: f64,
    pub beta: f64,
}

impl LossWeights {
    pub fn new(gamma: f64, alpha: f64, beta: f64) -> Result<Self> {
        for (name, v) in [("gamma", gamma), ("alpha", alpha), ("beta", beta)] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::InvalidArgument(format!("loss weight {name} must be >= 0, got {v}")));
            }
        }
        Ok(LossWeights { gamma, alpha, beta })
    }

    /// Compressive sensing: swap plus 0.05 × self.
    pub fn compressive() -> Self {
        LossWeights {
            gamma: 0.05,
            alpha: 0.0,
            beta: 0.0,
        }
    }

    /// Blind deblurring: every weight one.
    pub fn blind() -> Self {
        LossWeights {
            gamma: 1.0,
            alpha: 1.0,
            beta: 1.0,
        }
    }
}

/// Measurement operators of one batch of pairs, on the tape.
pub enum BatchOps<'t, T: Real> {
    /// Patch projections. Predictions are `[Σ patches, 1, p, p]` in sample
    /// order; measurements `[Σ patches, m]` likewise.
    Compressive {
        phi_t: Var<'t, T>,
        ops1: Vec<CompressivePatchOp>,
        ops2: Vec<CompressivePatchOp>,
    },
    /// Per-sample blur kernels `[B, kh, kw]` (constants, or detached
    /// estimates). Residuals are cropped by `margin` pixels on every side.
    Blur {
        k1: Var<'t, T>,
        k2: Var<'t, T>,
        margin: usize,
    },
}

/// Operators and the frozen measurements of a batch.
pub struct LossBatch<'t, T: Real> {
    pub ops: BatchOps<'t, T>,
    pub y1: Var<'t, T>,
    pub y2: Var<'t, T>,
}

impl<'t, T: Real> LossBatch<'t, T> {
    /// `ρ(θ_b f_a − y_b)` where `θ_b` belongs to measurement `b` of each pair.
    fn term(&self, f_a: Var<'t, T>, from_first: bool, to_first: bool, rho: LossKind) -> Result<Var<'t, T>> {
        let y_b = if to_first { self.y1 } else { self.y2 };
        match &self.ops {
            BatchOps::Compressive { phi_t, ops1, ops2 } => {
                let src = if from_first { ops1 } else { ops2 };
                let dst = if to_first { ops1 } else { ops2 };
                if from_first == to_first {
                    cs_self_term(f_a, *phi_t, y_b, rho)
                } else {
                    cs_cross_term(f_a, src, dst, *phi_t, y_b, rho)
                }
            }
            BatchOps::Blur { k1, k2, margin } => {
                let k = if to_first { *k1 } else { *k2 };
                let pred = f_a.blur(k)?;
                if pred.shape() != y_b.shape() {
                    return Err(Error::shape("blur loss", &pred.shape(), &y_b.shape()));
                }
                Ok(rho.rho(crop(pred.sub(y_b)?, *margin)?))
            }
        }
    }
}

/// `ρ(θ₂ f(y₁) − y₂) + ρ(θ₁ f(y₂) − y₁)`.
pub fn swap_loss<'t, T: Real>(f1: Var<'t, T>, f2: Var<'t, T>, batch: &LossBatch<'t, T>, rho: LossKind) -> Result<Var<'t, T>> {
    batch.term(f1, true, false, rho)?.add(batch.term(f2, false, true, rho)?)
}

/// `ρ(θ₁ f(y₁) − y₁) + ρ(θ₂ f(y₂) − y₂)`.
pub fn self_loss<'t, T: Real>(f1: Var<'t, T>, f2: Var<'t, T>, batch: &LossBatch<'t, T>, rho: LossKind) -> Result<Var<'t, T>> {
    batch.term(f1, true, true, rho)?.add(batch.term(f2, false, false, rho)?)
}

fn sum_terms<'t, T: Real>(op: &'static str, pairs: &[(Var<'t, T>, Var<'t, T>)], rho: LossKind) -> Result<Var<'t, T>> {
    let mut total: Option<Var<'t, T>> = None;
    for &(pred, target) in pairs {
        if pred.shape() != target.shape() {
            return Err(Error::shape(op, &pred.shape(), &target.shape()));
        }
        let t = rho.rho(pred.sub(target)?);
        total = Some(match total {
            Some(acc) => acc.add(t)?,
            None => t,
        });
    }
    total.ok_or_else(|| Error::InvalidArgument(format!("{op} over an empty set")))
}

/// `Σᵢ ρ(g(y⁺ᵢ) − θ⁺ᵢ)` over `(estimate, true kernel)` pairs.
pub fn proxy_param_loss<'t, T: Real>(pairs: &[(Var<'t, T>, Var<'t, T>)], rho: LossKind) -> Result<Var<'t, T>> {
    sum_terms("proxy parameter loss", pairs, rho)
}

/// `Σᵢ ρ(f(y⁺ᵢ) − x⁺ᵢ)` over `(prediction, proxy image)` pairs.
pub fn proxy_image_loss<'t, T: Real>(pairs: &[(Var<'t, T>, Var<'t, T>)], rho: LossKind) -> Result<Var<'t, T>> {
    sum_terms("proxy image loss", pairs, rho)
}

/// The individual terms of one objective evaluation.
#[derive(Clone, Copy)]
pub struct LossParts<'t, T: Real> {
    pub swap: Var<'t, T>,
    pub self_: Option<Var<'t, T>>,
    pub prox_theta: Option<Var<'t, T>>,
    pub prox_x: Option<Var<'t, T>>,
}

/// `L_swap + γ L_self + α L_prox:θ + β L_prox:x`; zero-weighted or absent
/// terms are left off the tape entirely.
pub fn combined_objective<'t, T: Real>(parts: &LossParts<'t, T>, w: &LossWeights) -> Result<Var<'t, T>> {
    let mut total = parts.swap;
    for (term, weight) in [(parts.self_, w.gamma), (parts.prox_theta, w.alpha), (parts.prox_x, w.beta)] {
        if let Some(t) = term {
            if weight != 0.0 {
                total = total.add(t.scale(T::of(weight)))?;
            }
        }
    }
    Ok(total)
}

/// Interior of `[B, C, H, W]` without a `margin`-pixel border, flattened
/// to `[B, C·(H−2m)·(W−2m)]`.
pub fn crop<'t, T: Real>(x: Var<'t, T>, margin: usize) -> Result<Var<'t, T>> {
    let s = x.shape();
    if s.len() != 4 || s[2] <= 2 * margin || s[3] <= 2 * margin {
        return Err(Error::InvalidArgument(format!("cannot crop {margin} pixels from {s:?}")));
    }
    if margin == 0 {
        let n = s[0];
        return x.reshape(&[n, s[1..].iter().product()]);
    }
    let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
    let (ih, iw) = (h - 2 * margin, w - 2 * margin);
    let mut index = Vec::with_capacity(n * c * ih * iw);
    for b in 0..n * c {
        for r in margin..h - margin {
            for col in margin..w - margin {
                index.push(b * h * w + r * w + col);
            }
        }
    }
    x.gather(Rc::from(index), &[n, c * ih * iw])
}

fn cs_self_term<'t, T: Real>(f: Var<'t, T>, phi_t: Var<'t, T>, y: Var<'t, T>, rho: LossKind) -> Result<Var<'t, T>> {
    let s = f.shape();
    let d = phi_t.shape()[0];
    let rows = f.reshape(&[s[0], s.iter().skip(1).product::<usize>()])?;
    if rows.shape()[1] != d {
        return Err(Error::shape("compressive self loss", &s, &phi_t.shape()));
    }
    let pred = rows.matmul(phi_t)?;
    if pred.shape() != y.shape() {
        return Err(Error::shape("compressive self loss", &pred.shape(), &y.shape()));
    }
    Ok(rho.rho(pred.sub(y)?))
}

/// Assembles each sample's partition-`a` predictions into its image, then
/// projects the partition-`b` patches lying inside that coverage. Patches
/// of `b` outside it are skipped: those pixels were never predicted.
fn cs_cross_term<'t, T: Real>(
    f_a: Var<'t, T>,
    src: &[CompressivePatchOp],
    dst: &[CompressivePatchOp],
    phi_t: Var<'t, T>,
    y_b: Var<'t, T>,
    rho: LossKind,
) -> Result<Var<'t, T>> {
    let tape: &'t Tape<T> = f_a.tape();
    let (d, m) = (phi_t.shape()[0], phi_t.shape()[1]);
    if src.len() != dst.len() || src.is_empty() {
        return Err(Error::InvalidArgument("mismatched compressive batch".into()));
    }
    let (h, w) = src[0].image();
    let total_a: usize = src.iter().map(|o| o.partition().len()).sum();
    let total_b: usize = dst.iter().map(|o| o.partition().len()).sum();
    if f_a.value().numel() != total_a * d || y_b.shape() != [total_b, m] {
        return Err(Error::shape("compressive swap loss", &f_a.shape(), &y_b.shape()));
    }

    let mut scatter = Vec::with_capacity(total_a * d);
    let mut gather = Vec::new();
    let mut target_rows = Vec::new();
    let mut row_base = 0;
    for (s, (a, b)) in src.iter().zip(dst).enumerate() {
        if a.image() != (h, w) || b.image() != (h, w) {
            return Err(Error::InvalidArgument("compressive batch mixes image sizes".into()));
        }
        let base = s * h * w;
        scatter.extend(a.partition().pixel_indices().iter().map(|i| base + i));
        let b_idx = b.partition().pixel_indices();
        for p in b.partition().patches_covered_by(a.partition()) {
            gather.extend(b_idx[p * d..(p + 1) * d].iter().map(|i| base + i));
            target_rows.push(row_base + p);
        }
        row_base += b.partition().len();
    }
    if target_rows.is_empty() {
        return Ok(tape.constant(Tensor::scalar(T::zero())));
    }
    let k = target_rows.len();
    let canvas = f_a.scatter_add(Rc::from(scatter), &[src.len() * h * w])?;
    let patches = canvas.gather(Rc::from(gather), &[k, d])?;
    let pred = patches.matmul(phi_t)?;
    let target_index: Vec<usize> = target_rows.iter().flat_map(|&r| r * m..(r + 1) * m).collect();
    let target = y_b.gather(Rc::from(target_index), &[k, m])?;
    Ok(rho.rho(pred.sub(target)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rho_is_zero_only_at_zero() {
        let tape = Tape::<f64>::new();
        for kind in [LossKind::L1, LossKind::L2] {
            assert_eq!(kind.rho(tape.constant(Tensor::zeros(&[3]))).item(), 0.0);
            let v = kind.rho(tape.constant(Tensor::from_f64(&[3], &[0.0, -0.5, 0.0]).unwrap()));
            assert!(v.item() > 0.0);
        }
    }

    #[test]
    fn weights_reject_negatives() {
        assert!(LossWeights::new(-0.1, 0.0, 0.0).is_err());
        assert!(LossWeights::new(0.05, 0.0, 0.0).is_ok());
    }

    #[test]
    fn proxy_image_l1_mean_reduction() {
        let tape = Tape::<f64>::new();
        let a = tape.constant(Tensor::zeros(&[2, 2]));
        let b = tape.constant(Tensor::full(&[2, 2], 1.0));
        assert_eq!(proxy_image_loss(&[(a, b)], LossKind::L1).unwrap().item(), 1.0);
    }

    #[test]
    fn uniform_versus_delta_kernel() {
        let tape = Tape::<f64>::new();
        let g = tape.constant(Tensor::full(&[3, 3], 1.0 / 9.0));
        let mut delta = Tensor::zeros(&[3, 3]);
        delta.data_mut()[4] = 1.0;
        let l = proxy_param_loss(&[(g, tape.constant(delta))], LossKind::L1).unwrap().item();
        // Summed over the 9 entries the residual is 8/9 + (1 - 1/9) = 16/9.
        assert!((l * 9.0 - 16.0 / 9.0).abs() < 1e-12);
    }

    #[test]
    fn combined_objective_weights() {
        let tape = Tape::<f64>::new();
        let c = |v: f64| tape.constant(Tensor::scalar(v));
        let parts = LossParts {
            swap: c(1.0),
            self_: Some(c(2.0)),
            prox_theta: Some(c(3.0)),
            prox_x: Some(c(4.0)),
        };
        let cs = combined_objective(&parts, &LossWeights::compressive()).unwrap().item();
        assert!((cs - 1.1).abs() < 1e-12);
        assert_eq!(combined_objective(&parts, &LossWeights::blind()).unwrap().item(), 10.0);
        let zero = LossParts {
            swap: c(0.0),
            self_: Some(c(0.0)),
            prox_theta: None,
            prox_x: Some(c(0.0)),
        };
        assert_eq!(combined_objective(&zero, &LossWeights::blind()).unwrap().item(), 0.0);
    }

    #[test]
    fn crop_keeps_interior() {
        let tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::new(&[1, 1, 4, 4], (0..16).map(f64::from).collect()).unwrap());
        let c = crop(x, 1).unwrap();
        assert_eq!(c.value().data(), &[5.0, 6.0, 9.0, 10.0]);
    }
}
