//! Supervised, unsupervised non-blind and unsupervised blind training.

mod adam;
mod eval;
mod proxy;
mod task;

pub use adam::Adam;
pub use eval::{evaluate, psnr, psnr_from_mse, EvalReport, PSNR_CAP};
pub use proxy::{make_proxy_batch, ProxySample};
pub use task::{EvalSet, Task};

use rand::seq::SliceRandom;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::losses::{
    combined_objective, proxy_image_loss, proxy_param_loss, self_loss, swap_loss, BatchOps, LossBatch, LossKind,
    LossParts, LossWeights,
};
use crate::measurement::{measure, CompressivePatchOp, GaussianNoise, MeasurementOp, MeasurementPair, ParamDistribution};
use crate::models::{Model, ParamSet, Role};
use crate::rng::{derive_seed, stream};
use crate::tensor::{Gradients, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Regime {
    Supervised,
    UnsupNonBlind,
    UnsupBlind,
}

impl Regime {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "supervised" => Ok(Regime::Supervised),
            "unsup-nonblind" => Ok(Regime::UnsupNonBlind),
            "unsup-blind" => Ok(Regime::UnsupBlind),
            _ => Err(Error::Config(format!(
                "unknown regime {s:?} (expected supervised, unsup-nonblind or unsup-blind)"
            ))),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Regime::Supervised => "supervised",
            Regime::UnsupNonBlind => "unsup-nonblind",
            Regime::UnsupBlind => "unsup-blind",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub regime: Regime,
    pub weights: LossWeights,
    pub rho: LossKind,
    pub lr: f64,
    /// Each drop divides the learning rate by √10.
    pub lr_drops: usize,
    pub plateau_patience: usize,
    /// Relative improvement of the validation objective that resets the
    /// plateau counter.
    pub plateau_tol: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Hard cap on optimiser steps, for short diagnostic runs.
    pub max_steps: Option<u64>,
    pub seed: u64,
    pub eval_interval: usize,
    /// Epochs before the proxy losses switch on.
    pub proxy_warmup_epochs: usize,
    /// Stop-gradient on `θ̂ = g(y)` inside the measurement losses. Turning it
    /// off reproduces the failure mode of training `g` on those losses.
    pub detach_kernel_estimate: bool,
    /// Assert the gradient-isolation contracts on every step.
    pub check_isolation: bool,
    pub noise: GaussianNoise,
}

impl TrainConfig {
    pub fn new(regime: Regime, task: &Task) -> Self {
        let weights = match (task, regime) {
            (Task::Compressive { .. }, _) => LossWeights::compressive(),
            (Task::Deblur { .. }, Regime::UnsupBlind) => LossWeights::blind(),
            (Task::Deblur { .. }, _) => LossWeights {
                gamma: 1.0,
                alpha: 0.0,
                beta: 1.0,
            },
        };
        TrainConfig {
            regime,
            weights,
            rho: task.default_rho(),
            lr: 1e-3,
            lr_drops: 2,
            plateau_patience: 5,
            plateau_tol: 1e-3,
            batch_size: 16,
            max_epochs: 100,
            max_steps: None,
            seed: 0,
            eval_interval: 1,
            proxy_warmup_epochs: 0,
            detach_kernel_estimate: true,
            check_isolation: false,
            noise: GaussianNoise::none(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) {
            return Err(Error::Config(format!("learning rate must be positive, got {}", self.lr)));
        }
        if self.batch_size == 0 || self.eval_interval == 0 {
            return Err(Error::Config("batch_size and eval_interval must be >= 1".into()));
        }
        LossWeights::new(self.weights.gamma, self.weights.alpha, self.weights.beta)?;
        if self.regime != Regime::UnsupBlind && self.weights.alpha != 0.0 {
            return Err(Error::Config("alpha applies to blind training only".into()));
        }
        Ok(())
    }
}

/// Training data. Supervised runs see latent images and draw fresh
/// measurements every epoch; unsupervised runs see frozen pairs only.
#[derive(Clone, Debug)]
pub enum TrainData {
    Supervised {
        train: Vec<Tensor<f32>>,
        val: Vec<Tensor<f32>>,
    },
    Pairs {
        train: Vec<MeasurementPair>,
        val: Vec<MeasurementPair>,
    },
}

/// Per-epoch means of every loss term plus validation results.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub step: u64,
    pub swap: f64,
    pub self_: f64,
    pub prox_theta: f64,
    pub prox_x: f64,
    pub supervised: f64,
    pub total: f64,
    pub lr: f64,
    pub val_objective: Option<f64>,
    pub val_psnr: Option<f64>,
    /// SHA-256 of every training measurement, unsupervised regimes only.
    pub pair_hash: Option<String>,
    pub g_calls: u64,
}

impl EpochRecord {
    pub const CSV_HEADER: &'static str =
        "epoch,step,swap,self,prox_theta,prox_x,supervised,total,lr,val_objective,val_psnr,pair_hash";

    pub fn csv_row(&self) -> String {
        let opt = |v: Option<f64>| v.map(|v| format!("{v:.8e}")).unwrap_or_default();
        format!(
            "{},{},{:.8e},{:.8e},{:.8e},{:.8e},{:.8e},{:.8e},{:.8e},{},{},{}",
            self.epoch,
            self.step,
            self.swap,
            self.self_,
            self.prox_theta,
            self.prox_x,
            self.supervised,
            self.total,
            self.lr,
            opt(self.val_objective),
            opt(self.val_psnr),
            self.pair_hash.as_deref().unwrap_or("")
        )
    }
}

#[derive(Clone, Debug, Default)]
pub struct History {
    pub records: Vec<EpochRecord>,
    pub stopped_early: bool,
    /// Steps on which the isolation contracts were checked and held.
    pub isolation_checks: u64,
}

impl History {
    pub fn to_csv(&self) -> String {
        let mut s = String::from(EpochRecord::CSV_HEADER);
        s.push('\n');
        for r in &self.records {
            s.push_str(&r.csv_row());
            s.push('\n');
        }
        s
    }
}

/// Resumable optimiser state.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub adam: Adam<f32>,
    pub epoch: usize,
    pub lr: f64,
    pub drops: usize,
}

pub struct TrainOutcome {
    pub model: Model<f32>,
    pub best: Model<f32>,
    pub history: History,
    pub state: TrainState,
}

#[derive(Default, Clone, Copy)]
struct StepLosses {
    swap: f64,
    self_: f64,
    prox_theta: f64,
    prox_x: f64,
    supervised: f64,
    total: f64,
}

impl StepLosses {
    fn accumulate(&mut self, o: &StepLosses) {
        self.swap += o.swap;
        self.self_ += o.self_;
        self.prox_theta += o.prox_theta;
        self.prox_x += o.prox_x;
        self.supervised += o.supervised;
        self.total += o.total;
    }
}

/// SHA-256 over every `y1`, `y2` of the pairs, in order.
pub fn pair_hash(pairs: &[MeasurementPair]) -> String {
    let mut h = Sha256::new();
    for p in pairs {
        for y in [&p.y1, &p.y2] {
            for d in y.shape() {
                h.update((*d as u64).to_le_bytes());
            }
            for v in y.data() {
                h.update(v.to_le_bytes());
            }
        }
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

fn concat_rows(parts: &[Tensor<f32>], tail: &[usize]) -> Result<Tensor<f32>> {
    let rows: usize = parts.iter().map(|t| t.shape()[0]).sum();
    let mut data = Vec::with_capacity(parts.iter().map(Tensor::numel).sum());
    for t in parts {
        data.extend_from_slice(t.data());
    }
    let mut shape = vec![rows];
    shape.extend_from_slice(tail);
    Tensor::new(&shape, data)
}

struct PairBatch {
    z1: Tensor<f32>,
    z2: Tensor<f32>,
    y1: Tensor<f32>,
    y2: Tensor<f32>,
    cs_ops: Option<(Vec<CompressivePatchOp>, Vec<CompressivePatchOp>)>,
    kernels: Option<(Tensor<f32>, Tensor<f32>)>,
}

pub struct Trainer<'a> {
    task: &'a Task,
    config: TrainConfig,
    dist: ParamDistribution,
    model: Model<f32>,
    best: Model<f32>,
    best_val: f64,
    bad_evals: usize,
    state: TrainState,
    history: History,
    g_calls: u64,
}

impl<'a> Trainer<'a> {
    pub fn new(task: &'a Task, config: TrainConfig, model: Model<f32>) -> Result<Self> {
        config.validate()?;
        if config.regime == Regime::UnsupBlind && !model.deblur().is_some_and(|d| d.has_kernel_head()) {
            return Err(Error::Regime("blind training needs a model with a kernel decoder".into()));
        }
        if config.regime == Regime::UnsupBlind && !matches!(task, Task::Deblur { .. }) {
            return Err(Error::Regime("blind training is implemented for deblurring only".into()));
        }
        if config.weights.beta != 0.0 && config.regime != Regime::Supervised && !matches!(task, Task::Deblur { .. }) {
            return Err(Error::Regime("proxy losses need a blur-kernel task".into()));
        }
        let state = TrainState {
            adam: Adam::new(&model.params),
            epoch: 0,
            lr: config.lr,
            drops: 0,
        };
        Ok(Trainer {
            task,
            dist: task.distribution(),
            best: model.clone(),
            model,
            best_val: f64::INFINITY,
            bad_evals: 0,
            state,
            history: History::default(),
            g_calls: 0,
            config,
        })
    }

    /// Continues from a saved state; the step counter carries over.
    pub fn resume(mut self, state: TrainState) -> Result<Self> {
        if state.adam.m.len() != self.model.params.len() {
            return Err(Error::Format("optimiser state does not match the model".into()));
        }
        self.state = state;
        Ok(self)
    }

    pub fn model(&self) -> &Model<f32> {
        &self.model
    }

    pub fn state(&self) -> &TrainState {
        &self.state
    }

    pub fn g_calls(&self) -> u64 {
        self.g_calls
    }

    fn check_data(&self, data: &TrainData) -> Result<()> {
        match (self.config.regime, data) {
            (Regime::Supervised, TrainData::Supervised { train, .. }) => {
                if train.is_empty() {
                    return Err(Error::InvalidArgument("no training images".into()));
                }
            }
            (Regime::Supervised, _) => return Err(Error::Regime("supervised training needs latent images".into())),
            (_, TrainData::Supervised { .. }) => {
                return Err(Error::Regime("unsupervised training needs measurement pairs".into()))
            }
            (regime, TrainData::Pairs { train, val }) => {
                if train.is_empty() {
                    return Err(Error::InvalidArgument("no training pairs".into()));
                }
                for p in train.iter().chain(val) {
                    if p.x_eval().is_some() {
                        return Err(Error::Regime("ground truth must be withheld from unsupervised training".into()));
                    }
                    match (regime, p.thetas().is_some()) {
                        (Regime::UnsupBlind, true) => {
                            return Err(Error::Regime("blind training data must not carry operators".into()))
                        }
                        (Regime::UnsupNonBlind, false) => {
                            return Err(Error::Regime("non-blind training needs the operators of every pair".into()))
                        }
                        _ => {}
                    }
                }
            }
        }
        Ok(())
    }

    fn pair_batch(&self, pairs: &[&MeasurementPair]) -> Result<PairBatch> {
        let (h, w) = self.task.image();
        match self.task {
            Task::Compressive { phi, .. } => {
                let (p, m) = (phi.patch(), phi.rows());
                let mut ops1 = Vec::with_capacity(pairs.len());
                let mut ops2 = Vec::with_capacity(pairs.len());
                let (mut z1, mut z2) = (Vec::new(), Vec::new());
                for pair in pairs {
                    let (a, b) = pair
                        .thetas()
                        .ok_or_else(|| Error::Regime("compressive pairs need their partitions".into()))?;
                    let (a, b) = match (a, b) {
                        (MeasurementOp::Compressive(a), MeasurementOp::Compressive(b)) => (a.clone(), b.clone()),
                        _ => return Err(Error::Regime("expected compressive operators".into())),
                    };
                    z1.push(a.patch_inputs(&pair.y1)?);
                    z2.push(b.patch_inputs(&pair.y2)?);
                    ops1.push(a);
                    ops2.push(b);
                }
                let ys = |sel: fn(&MeasurementPair) -> &Tensor<f32>| {
                    concat_rows(&pairs.iter().map(|p| sel(p).clone()).collect::<Vec<_>>(), &[m])
                };
                Ok(PairBatch {
                    z1: concat_rows(&z1, &[1, p, p])?,
                    z2: concat_rows(&z2, &[1, p, p])?,
                    y1: ys(|p| &p.y1)?,
                    y2: ys(|p| &p.y2)?,
                    cs_ops: Some((ops1, ops2)),
                    kernels: None,
                })
            }
            Task::Deblur { .. } => {
                let stack = |sel: fn(&MeasurementPair) -> &Tensor<f32>| {
                    concat_rows(&pairs.iter().map(|p| sel(p).clone()).collect::<Vec<_>>(), &[w])
                        .and_then(|t| t.reshape(&[pairs.len(), 1, h, w]))
                };
                let kernels = match pairs[0].thetas() {
                    None => None,
                    Some(_) => {
                        let mut k1 = Vec::with_capacity(pairs.len());
                        let mut k2 = Vec::with_capacity(pairs.len());
                        for pair in pairs {
                            let (a, b) = pair
                                .thetas()
                                .ok_or_else(|| Error::Regime("mixed blind and non-blind pairs".into()))?;
                            let (a, b) = (
                                a.as_convolution().ok_or_else(|| Error::Regime("expected blur operators".into()))?,
                                b.as_convolution().ok_or_else(|| Error::Regime("expected blur operators".into()))?,
                            );
                            k1.push(a.kernel_tensor::<f32>());
                            k2.push(b.kernel_tensor::<f32>());
                        }
                        Some((Tensor::stack(&k1)?, Tensor::stack(&k2)?))
                    }
                };
                let (y1, y2) = (stack(|p| &p.y1)?, stack(|p| &p.y2)?);
                Ok(PairBatch {
                    z1: y1.clone(),
                    z2: y2.clone(),
                    y1,
                    y2,
                    cs_ops: None,
                    kernels,
                })
            }
        }
    }

    /// Builds the full objective for one batch of pairs on `tape`. Proxy
    /// terms are drawn from `proxy = Some((seed, key))`, or skipped.
    fn pair_objective<'t>(
        &mut self,
        tape: &'t Tape<f32>,
        vars: &[Var<'t, f32>],
        batch: &PairBatch,
        proxy: Option<(u64, u64)>,
    ) -> Result<(LossParts<'t, f32>, Var<'t, f32>)> {
        let cfg = self.config.clone();
        let (y1, y2) = (tape.constant(batch.y1.clone()), tape.constant(batch.y2.clone()));
        let (z1, z2) = (tape.constant(batch.z1.clone()), tape.constant(batch.z2.clone()));
        let blind = cfg.regime == Regime::UnsupBlind;

        let (f1, f2, ops) = match self.task {
            Task::Compressive { phi, .. } => {
                let (ops1, ops2) = batch.cs_ops.clone().expect("compressive batch");
                let f1 = self.model.forward_image(vars, z1)?;
                let f2 = self.model.forward_image(vars, z2)?;
                let phi_t = tape.constant(phi.transposed());
                (f1, f2, BatchOps::Compressive { phi_t, ops1, ops2 })
            }
            Task::Deblur { .. } => {
                let net = self.model.deblur().expect("deblur model").clone();
                let feats1 = net.encode(vars, z1)?;
                let feats2 = net.encode(vars, z2)?;
                let f1 = net.decode_image(vars, &feats1, z1)?;
                let f2 = net.decode_image(vars, &feats2, z2)?;
                let (k1, k2) = if blind {
                    self.g_calls += 2;
                    let k1 = net.decode_kernel(vars, &feats1)?;
                    let k2 = net.decode_kernel(vars, &feats2)?;
                    if cfg.detach_kernel_estimate {
                        (k1.detach(), k2.detach())
                    } else {
                        (k1, k2)
                    }
                } else {
                    let (k1, k2) = batch.kernels.clone().expect("non-blind kernels");
                    (tape.constant(k1), tape.constant(k2))
                };
                (
                    f1,
                    f2,
                    BatchOps::Blur {
                        k1,
                        k2,
                        margin: self.task.margin(),
                    },
                )
            }
        };
        let loss_batch = LossBatch { ops, y1, y2 };
        let swap = swap_loss(f1, f2, &loss_batch, cfg.rho)?;
        let self_ = (cfg.weights.gamma != 0.0)
            .then(|| self_loss(f1, f2, &loss_batch, cfg.rho))
            .transpose()?;

        let (mut prox_theta, mut prox_x) = (None, None);
        let want_x = cfg.weights.beta != 0.0;
        let want_theta = blind && cfg.weights.alpha != 0.0;
        if let (Some((seed, key)), true) = (proxy, want_x || want_theta) {
            let net = self.model.deblur().expect("deblur model").clone();
            let (mut img_pairs, mut ker_pairs) = (Vec::new(), Vec::new());
            for (slot, f) in [f1, f2].into_iter().enumerate() {
                let x_plus = f.detach();
                let samples =
                    make_proxy_batch(&x_plus.value(), &self.dist, cfg.noise, seed, key, slot as u64)?;
                let b = samples.len();
                let (h, w) = self.task.image();
                let y_plus = concat_rows(&samples.iter().map(|s| s.y_plus.clone()).collect::<Vec<_>>(), &[w])?
                    .reshape(&[b, 1, h, w])?;
                let y_plus = tape.constant(y_plus);
                let feats = net.encode(vars, y_plus)?;
                if want_x {
                    img_pairs.push((net.decode_image(vars, &feats, y_plus)?, x_plus));
                }
                if want_theta {
                    self.g_calls += 1;
                    let theta = Tensor::stack(&samples.iter().map(|s| s.theta_plus.kernel_tensor()).collect::<Vec<_>>())?;
                    ker_pairs.push((net.decode_kernel(vars, &feats)?, tape.constant(theta)));
                }
            }
            if want_x {
                prox_x = Some(proxy_image_loss(&img_pairs, cfg.rho)?);
            }
            if want_theta {
                prox_theta = Some(proxy_param_loss(&ker_pairs, cfg.rho)?);
            }
        }
        let parts = LossParts {
            swap,
            self_,
            prox_theta,
            prox_x,
        };
        let total = combined_objective(&parts, &cfg.weights)?;
        Ok((parts, total))
    }

    /// Fresh measurements of `images`; `keys[i]` names the random stream of
    /// image `i`.
    fn supervised_batch(&self, images: &[&Tensor<f32>], purpose: &str, keys: &[u64]) -> Result<(Tensor<f32>, Tensor<f32>)> {
        let (mut inputs, mut targets) = (Vec::new(), Vec::new());
        for (x, &key) in images.iter().zip(keys) {
            let mut rng = stream(self.config.seed, purpose, key);
            let op = self.dist.sample(&mut rng)?;
            let y = measure(&op, x, self.config.noise, &mut rng)?;
            inputs.push(self.task.network_input(&op, &y)?);
            targets.push(self.task.target(&op, x)?);
        }
        let tail = inputs[0].shape()[1..].to_vec();
        Ok((concat_rows(&inputs, &tail)?, concat_rows(&targets, &tail)?))
    }

    fn isolation_check(&self, tape: &Tape<f32>, vars: &[Var<'_, f32>], parts: &LossParts<'_, f32>) -> Result<()> {
        let zero_for = |grads: &Gradients<f32>, role: Role, what: &str| -> Result<()> {
            for (i, v) in vars.iter().enumerate() {
                if self.model.params.role(i) != role {
                    continue;
                }
                if let Some(g) = grads.get(*v) {
                    if g.data().iter().any(|&x| x != 0.0) {
                        return Err(Error::Isolation(format!(
                            "{what} reaches {} at step {}",
                            self.model.params.name(i),
                            self.state.adam.step
                        )));
                    }
                }
            }
            Ok(())
        };
        let w = &self.config.weights;
        let mut measurement = parts.swap;
        if let Some(s) = parts.self_ {
            measurement = measurement.add(s.scale(w.gamma as f32))?;
        }
        zero_for(&tape.backward(measurement)?, Role::Kernel, "swap/self loss")?;
        if let Some(p) = parts.prox_theta {
            zero_for(&tape.backward(p.scale(w.alpha as f32))?, Role::Image, "proxy parameter loss")?;
        }
        Ok(())
    }

    fn apply_step<'t>(
        &mut self,
        tape: &'t Tape<f32>,
        vars: &[Var<'t, f32>],
        total: Var<'t, f32>,
        losses: StepLosses,
        epoch: usize,
        detail: impl FnOnce() -> String,
    ) -> Result<()> {
        if !losses.total.is_finite() {
            return Err(Error::NonFinite {
                epoch,
                step: self.state.adam.step as usize,
                detail: detail(),
            });
        }
        let mut grads = tape.backward(total)?;
        let grads: Vec<Option<Tensor<f32>>> = vars.iter().map(|v| grads.take(*v)).collect();
        if let Some(bad) = grads.iter().position(|g| g.as_ref().is_some_and(|g| !g.is_finite())) {
            return Err(Error::NonFinite {
                epoch,
                step: self.state.adam.step as usize,
                detail: format!("gradient of {} is not finite; {}", self.model.params.name(bad), detail()),
            });
        }
        self.state.adam.update(&mut self.model.params, &grads, self.state.lr)
    }

    fn train_epoch(&mut self, data: &TrainData, epoch: usize) -> Result<(StepLosses, usize)> {
        let n = match data {
            TrainData::Supervised { train, .. } => train.len(),
            TrainData::Pairs { train, .. } => train.len(),
        };
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut stream(self.config.seed, "shuffle", epoch as u64));
        let mut sums = StepLosses::default();
        let mut steps = 0;
        let proxy = epoch >= self.config.proxy_warmup_epochs;
        for chunk in order.chunks(self.config.batch_size) {
            if self.config.max_steps.is_some_and(|m| self.state.adam.step >= m) {
                break;
            }
            let tape = Tape::new();
            let vars = self.model.params.bind(&tape);
            let losses = match data {
                TrainData::Supervised { train, .. } => {
                    let imgs: Vec<&Tensor<f32>> = chunk.iter().map(|&i| &train[i]).collect();
                    let keys: Vec<u64> = chunk.iter().map(|&i| (epoch * n + i) as u64).collect();
                    let (z, target) = self.supervised_batch(&imgs, "supervised", &keys)?;
                    let pred = self.model.forward_image(&vars, tape.constant(z))?;
                    let loss = self.config.rho.rho(pred.sub(tape.constant(target))?);
                    let l = StepLosses {
                        supervised: loss.item() as f64,
                        total: loss.item() as f64,
                        ..StepLosses::default()
                    };
                    self.apply_step(&tape, &vars, loss, l, epoch, || format!("supervised batch {chunk:?}"))?;
                    l
                }
                TrainData::Pairs { train, .. } => {
                    let pairs: Vec<&MeasurementPair> = chunk.iter().map(|&i| &train[i]).collect();
                    let batch = self.pair_batch(&pairs)?;
                    let key = proxy.then_some((self.config.seed, self.state.adam.step));
                    let (parts, total) = self.pair_objective(&tape, &vars, &batch, key)?;
                    let item = |v: Option<Var<'_, f32>>| v.map_or(0.0, |v| v.item() as f64);
                    let l = StepLosses {
                        swap: parts.swap.item() as f64,
                        self_: item(parts.self_),
                        prox_theta: item(parts.prox_theta),
                        prox_x: item(parts.prox_x),
                        supervised: 0.0,
                        total: total.item() as f64,
                    };
                    if self.config.check_isolation && self.config.regime == Regime::UnsupBlind {
                        self.isolation_check(&tape, &vars, &parts)?;
                        self.history.isolation_checks += 1;
                    }
                    self.apply_step(&tape, &vars, total, l, epoch, || {
                        format!(
                            "pairs {chunk:?}: swap {} self {} prox_theta {} prox_x {}",
                            l.swap, l.self_, l.prox_theta, l.prox_x
                        )
                    })?;
                    l
                }
            };
            sums.accumulate(&losses);
            steps += 1;
        }
        Ok((sums, steps))
    }

    /// Validation objective: the supervised loss on fixed measurements of
    /// held-out images, or the full weighted objective on held-out pairs
    /// with proxy data from a fixed stream. Never ground-truth PSNR in the
    /// unsupervised case.
    pub fn validate(&mut self, data: &TrainData) -> Result<Option<f64>> {
        let bs = self.config.batch_size.max(16);
        let mut total = 0.0;
        let mut count = 0usize;
        match data {
            TrainData::Supervised { val, .. } => {
                for (c, chunk) in val.chunks(bs).enumerate() {
                    let imgs: Vec<&Tensor<f32>> = chunk.iter().collect();
                    let keys: Vec<u64> = (0..chunk.len()).map(|i| (c * bs + i) as u64).collect();
                    let (z, target) = self.supervised_batch(&imgs, "validation", &keys)?;
                    let tape = Tape::new();
                    let vars = self.model.params.bind_frozen(&tape);
                    let pred = self.model.forward_image(&vars, tape.constant(z))?;
                    total += self.config.rho.rho(pred.sub(tape.constant(target))?).item() as f64 * chunk.len() as f64;
                    count += chunk.len();
                }
            }
            TrainData::Pairs { val, .. } => {
                let proxy_seed = derive_seed(self.config.seed, "validation-proxy", 0);
                for (c, chunk) in val.chunks(bs).enumerate() {
                    let pairs: Vec<&MeasurementPair> = chunk.iter().collect();
                    let batch = self.pair_batch(&pairs)?;
                    let tape = Tape::new();
                    let vars = self.model.params.bind_frozen(&tape);
                    let g_before = self.g_calls;
                    let (_, obj) = self.pair_objective(&tape, &vars, &batch, Some((proxy_seed, c as u64)))?;
                    self.g_calls = g_before;
                    total += obj.item() as f64 * chunk.len() as f64;
                    count += chunk.len();
                }
            }
        }
        Ok((count > 0).then(|| total / count as f64))
    }

    /// Plateau rule: returns false once training should stop.
    fn schedule(&mut self, val: f64) -> bool {
        if val < self.best_val * (1.0 - self.config.plateau_tol) || !self.best_val.is_finite() {
            self.best_val = val;
            self.best = self.model.clone();
            self.bad_evals = 0;
            return true;
        }
        if val < self.best_val {
            self.best_val = val;
            self.best = self.model.clone();
        }
        self.bad_evals += 1;
        if self.bad_evals >= self.config.plateau_patience {
            if self.state.drops >= self.config.lr_drops {
                return false;
            }
            self.state.lr /= 10f64.sqrt();
            self.state.drops += 1;
            self.bad_evals = 0;
        }
        true
    }

    pub fn run(mut self, data: &TrainData, eval: Option<&EvalSet>) -> Result<TrainOutcome> {
        self.check_data(data)?;
        let hash_pairs = match data {
            TrainData::Pairs { train, .. } => Some(train),
            _ => None,
        };
        while self.state.epoch < self.config.max_epochs {
            let epoch = self.state.epoch;
            if self.config.max_steps.is_some_and(|m| self.state.adam.step >= m) {
                break;
            }
            let (sums, steps) = self.train_epoch(data, epoch)?;
            let k = steps.max(1) as f64;
            let mut rec = EpochRecord {
                epoch: epoch + 1,
                step: self.state.adam.step,
                swap: sums.swap / k,
                self_: sums.self_ / k,
                prox_theta: sums.prox_theta / k,
                prox_x: sums.prox_x / k,
                supervised: sums.supervised / k,
                total: sums.total / k,
                lr: self.state.lr,
                pair_hash: hash_pairs.map(|p| pair_hash(p)),
                g_calls: self.g_calls,
                ..EpochRecord::default()
            };
            self.state.epoch += 1;
            let mut keep_going = true;
            if (epoch + 1) % self.config.eval_interval == 0 {
                if let Some(v) = self.validate(data)? {
                    rec.val_objective = Some(v);
                    keep_going = self.schedule(v);
                }
                if let Some(set) = eval {
                    rec.val_psnr = Some(evaluate(&self.model, self.task, set)?.mean);
                }
            }
            self.history.records.push(rec);
            if !keep_going {
                self.history.stopped_early = true;
                break;
            }
        }
        if !self.best_val.is_finite() {
            self.best = self.model.clone();
        }
        Ok(TrainOutcome {
            model: self.model,
            best: self.best,
            history: self.history,
            state: self.state,
        })
    }
}

/// Trains `model` on `data` under `config`.
pub fn train(
    task: &Task,
    config: TrainConfig,
    model: Model<f32>,
    data: &TrainData,
    eval: Option<&EvalSet>,
) -> Result<TrainOutcome> {
    Trainer::new(task, config, model)?.run(data, eval)
}

/// Parameters of the given roles.
pub fn params_with_role(params: &ParamSet<f32>, role: Role) -> Vec<usize> {
    (0..params.len()).filter(|&i| params.role(i) == role).collect()
}
