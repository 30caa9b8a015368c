use rand::Rng;

use super::layers::{Conv, ConvSpec};
use super::params::{ParamSet, Role};
use crate::error::{Error, Result};
use crate::tensor::{Real, Var};

/// One U-Net of the compressive-sensing estimator: a 3×3 stem at patch
/// resolution, stride-2 4×4 downsampling, stride-2 4×4 transposed
/// upsampling with skip concatenation, then a 3×3 and a linear 1×1 layer.
#[derive(Clone, Debug, PartialEq)]
pub struct CsUNet {
    stem: Conv,
    down: Vec<Conv>,
    up: Vec<Conv>,
    end1: Conv,
    end2: Conv,
}

impl CsUNet {
    fn new<T: Real>(prefix: &str, cin: usize, widths: &[usize], params: &mut ParamSet<T>, rng: &mut impl Rng) -> Self {
        let name = |s: &str| format!("{prefix}.{s}");
        let stem = Conv::new(ConvSpec::conv(&name("conv1"), Role::Image, cin, widths[0], 3, 1), params, rng);
        let down = (1..widths.len())
            .map(|i| {
                let n = name(&format!("conv{}", i + 1));
                Conv::new(ConvSpec::conv(&n, Role::Image, widths[i - 1], widths[i], 4, 2), params, rng)
            })
            .collect();
        let mut up = Vec::new();
        let mut ch = widths[widths.len() - 1];
        for (j, i) in (1..widths.len()).rev().enumerate() {
            let n = name(&format!("upconv{}", j + 1));
            up.push(Conv::new(ConvSpec::up(&n, Role::Image, ch, widths[i - 1], 4, 2), params, rng));
            ch = 2 * widths[i - 1];
        }
        let end1 = Conv::new(ConvSpec::conv(&name("end1"), Role::Image, ch, widths[0], 3, 1), params, rng);
        let end2 = Conv::new(
            ConvSpec::conv(&name("end2"), Role::Image, widths[0], 1, 1, 1).linear(),
            params,
            rng,
        );
        CsUNet {
            stem,
            down,
            up,
            end1,
            end2,
        }
    }

    fn forward<'t, T: Real>(&self, vars: &[Var<'t, T>], x: Var<'t, T>) -> Result<Var<'t, T>> {
        let mut skips = vec![self.stem.forward(vars, x)?];
        for layer in &self.down {
            let next = layer.forward(vars, *skips.last().expect("stem"))?;
            skips.push(next);
        }
        let mut d = skips.pop().expect("bottleneck");
        for layer in &self.up {
            let u = layer.forward(vars, d)?;
            d = Var::concat(&[skips.pop().expect("skip"), u], 1)?;
        }
        self.end2.forward(vars, self.end1.forward(vars, d)?)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CsConfig {
    pub patch: usize,
    pub widths: Vec<usize>,
}

impl Default for CsConfig {
    fn default() -> Self {
        CsConfig {
            patch: 8,
            widths: vec![16, 32, 64],
        }
    }
}

/// Two stacked U-Nets on `Φᵀy` patches; the second sees `Φᵀy ⊕ u₁` and the
/// estimate is `u₁ + u₂`.
#[derive(Clone, Debug, PartialEq)]
pub struct CsEstimator {
    pub config: CsConfig,
    unet1: CsUNet,
    unet2: CsUNet,
}

impl CsEstimator {
    pub fn new<T: Real>(config: CsConfig, params: &mut ParamSet<T>, rng: &mut impl Rng) -> Result<Self> {
        let levels = config.widths.len();
        if levels == 0 || config.patch % (1 << (levels - 1)) != 0 {
            return Err(Error::InvalidArgument(format!(
                "patch {} must be divisible by 2^{} for {levels} U-Net levels",
                config.patch,
                levels.saturating_sub(1)
            )));
        }
        let unet1 = CsUNet::new("unet1", 1, &config.widths, params, rng);
        let unet2 = CsUNet::new("unet2", 2, &config.widths, params, rng);
        Ok(CsEstimator { config, unet1, unet2 })
    }

    /// `[n, 1, p, p]` back-projected patches to `[n, 1, p, p]` estimates.
    pub fn forward<'t, T: Real>(&self, vars: &[Var<'t, T>], z: Var<'t, T>) -> Result<Var<'t, T>> {
        let p = self.config.patch;
        let s = z.shape();
        if s.len() != 4 || s[1] != 1 || s[2] != p || s[3] != p {
            return Err(Error::shape("cs estimator input", &s, &[0, 1, p, p]));
        }
        let u1 = self.unet1.forward(vars, z)?;
        let u2 = self.unet2.forward(vars, Var::concat(&[z, u1], 1)?)?;
        u1.add(u2)
    }

    /// Output of the first U-Net alone.
    pub fn forward_first<'t, T: Real>(&self, vars: &[Var<'t, T>], z: Var<'t, T>) -> Result<Var<'t, T>> {
        self.unet1.forward(vars, z)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DeblurConfig {
    pub image: usize,
    pub widths: Vec<usize>,
    pub kernel: usize,
    /// Add the blurry input to the decoder output.
    pub residual: bool,
    /// Build the kernel decoder `g`.
    pub kernel_head: bool,
}

impl Default for DeblurConfig {
    fn default() -> Self {
        DeblurConfig {
            image: 32,
            widths: vec![16, 32, 64, 64],
            kernel: 5,
            residual: true,
            kernel_head: true,
        }
    }
}

/// Kernel decoder: stride-2 transposed layers with skips while the size
/// stays within the kernel, then stride-1 VALID transposes growing it to
/// `k×k`, a zero-initialised 1×1 logit layer and a spatial softmax.
#[derive(Clone, Debug, PartialEq)]
struct KernelHead {
    up: Vec<Conv>,
    grow: Vec<Conv>,
    logits: Conv,
    kernel: usize,
}

/// Single U-Net deblurring estimator with an optional kernel decoder that
/// shares its encoder.
#[derive(Clone, Debug, PartialEq)]
pub struct DeblurEstimator {
    pub config: DeblurConfig,
    enc: Vec<Conv>,
    dec: Vec<Conv>,
    out: Conv,
    head: Option<KernelHead>,
}

impl DeblurEstimator {
    pub fn new<T: Real>(config: DeblurConfig, params: &mut ParamSet<T>, rng: &mut impl Rng) -> Result<Self> {
        let w = &config.widths;
        let levels = w.len();
        if levels == 0 || config.image % (1 << levels) != 0 {
            return Err(Error::InvalidArgument(format!(
                "image size {} must be divisible by 2^{levels}",
                config.image
            )));
        }
        let mut enc = Vec::with_capacity(levels);
        let mut cin = 1;
        for (i, &c) in w.iter().enumerate() {
            let n = format!("conv{}", i + 1);
            enc.push(Conv::new(ConvSpec::conv(&n, Role::Shared, cin, c, 4, 2), params, rng));
            cin = c;
        }
        let mut dec = Vec::new();
        let mut ch = w[levels - 1];
        for (j, i) in (1..levels).rev().enumerate() {
            let n = format!("upconv{}", j + 1);
            dec.push(Conv::new(ConvSpec::up(&n, Role::Image, ch, w[i - 1], 4, 2), params, rng));
            ch = 2 * w[i - 1];
        }
        // With the input residual a zero output layer starts `f` at the
        // identity map.
        let out_spec = ConvSpec::up("output", Role::Image, ch, 1, 4, 2).linear();
        let out_spec = if config.residual { out_spec.zeroed() } else { out_spec };
        let out = Conv::new(out_spec, params, rng);
        let head = if config.kernel_head {
            Some(Self::kernel_head(&config, params, rng)?)
        } else {
            None
        };
        Ok(DeblurEstimator {
            config,
            enc,
            dec,
            out,
            head,
        })
    }

    fn kernel_head<T: Real>(config: &DeblurConfig, params: &mut ParamSet<T>, rng: &mut impl Rng) -> Result<KernelHead> {
        let w = &config.widths;
        let levels = w.len();
        let k = config.kernel;
        let mut size = config.image >> levels;
        if size > k {
            return Err(Error::InvalidArgument(format!(
                "bottleneck {size}x{size} is larger than the {k}x{k} kernel"
            )));
        }
        let mut up = Vec::new();
        let mut ch = w[levels - 1];
        let mut level = levels - 1;
        while level > 0 && size * 2 <= k {
            let n = format!("kupconv{}", up.len() + 1);
            up.push(Conv::new(ConvSpec::up(&n, Role::Kernel, ch, w[level - 1], 4, 2), params, rng));
            ch = 2 * w[level - 1];
            size *= 2;
            level -= 1;
        }
        let width = w[level];
        let mut grow = Vec::new();
        while size < k {
            let ks = (k - size + 1).min(4);
            let n = format!("kupconv{}", up.len() + grow.len() + 1);
            grow.push(Conv::new(ConvSpec::up(&n, Role::Kernel, ch, width, ks, 1).valid(), params, rng));
            ch = width;
            size += ks - 1;
        }
        let logits = Conv::new(
            ConvSpec::conv("koutput", Role::Kernel, ch, 1, 1, 1).linear().zeroed(),
            params,
            rng,
        );
        Ok(KernelHead { up, grow, logits, kernel: k })
    }

    pub fn has_kernel_head(&self) -> bool {
        self.head.is_some()
    }

    /// Encoder features, finest first.
    pub fn encode<'t, T: Real>(&self, vars: &[Var<'t, T>], y: Var<'t, T>) -> Result<Vec<Var<'t, T>>> {
        let n = self.config.image;
        let s = y.shape();
        if s.len() != 4 || s[1] != 1 || s[2] != n || s[3] != n {
            return Err(Error::shape("deblur estimator input", &s, &[0, 1, n, n]));
        }
        let mut feats: Vec<Var<'t, T>> = Vec::with_capacity(self.enc.len());
        let mut x = y;
        for layer in &self.enc {
            x = layer.forward(vars, x)?;
            feats.push(x);
        }
        Ok(feats)
    }

    /// `f(y)`: `[n, 1, H, W]`.
    pub fn decode_image<'t, T: Real>(
        &self,
        vars: &[Var<'t, T>],
        feats: &[Var<'t, T>],
        y: Var<'t, T>,
    ) -> Result<Var<'t, T>> {
        let mut d = feats[feats.len() - 1];
        for (j, layer) in self.dec.iter().enumerate() {
            let u = layer.forward(vars, d)?;
            d = Var::concat(&[feats[feats.len() - 2 - j], u], 1)?;
        }
        let out = self.out.forward(vars, d)?;
        if self.config.residual {
            out.add(y)
        } else {
            Ok(out)
        }
    }

    /// `g(y)`: `[n, k, k]` kernels, each nonnegative and summing to one.
    pub fn decode_kernel<'t, T: Real>(&self, vars: &[Var<'t, T>], feats: &[Var<'t, T>]) -> Result<Var<'t, T>> {
        let head = self
            .head
            .as_ref()
            .ok_or_else(|| Error::Regime("model was built without a kernel decoder".into()))?;
        let mut d = feats[feats.len() - 1];
        for (j, layer) in head.up.iter().enumerate() {
            let u = layer.forward(vars, d)?;
            d = Var::concat(&[feats[feats.len() - 2 - j], u], 1)?;
        }
        for layer in &head.grow {
            d = layer.forward(vars, d)?;
        }
        let logits = head.logits.forward(vars, d)?;
        let n = logits.shape()[0];
        logits.reshape(&[n, head.kernel, head.kernel])?.spatial_softmax()
    }

    pub fn forward<'t, T: Real>(&self, vars: &[Var<'t, T>], y: Var<'t, T>) -> Result<Var<'t, T>> {
        let feats = self.encode(vars, y)?;
        self.decode_image(vars, &feats, y)
    }
}
