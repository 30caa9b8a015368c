//! One function per subcommand. Each writes its outputs plus the resolved
//! configuration into the output directory and returns a short summary.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use nalgebra::DMatrix;
use rand_distr::{Distribution, StandardNormal};
use swaptrain::measurement::{
    gram_exact, gram_from_ops, kernel_spectrum, measure, q_rank_report, CompressivePatchOp, ConvolutionOp,
    GaussianNoise, MeasurementOp, ParamDistribution, SensingMatrix,
};
use swaptrain::models::{init_params, Model};
use swaptrain::rng::stream;
use swaptrain::theory::{
    eigenspace_comparison, linear_oracle, mc_swap_identity, noise_floor_check, zero_estimator_loss, GaussianImages,
    OperatorSet,
};
use swaptrain::training::{evaluate, Adam, Regime, Task, TrainData, TrainState, Trainer};
use swaptrain::{Error, Result, Tensor};

use crate::config::{ExperimentConfig, TaskKind};
use crate::dataset::{self, Manifest, Split};
use crate::io::{load_model, load_tensors, read_image, save_model, save_tensors, take_named, write_pgm};

pub const RESOLVED_CONFIG: &str = "config.resolved.txt";
pub const FINAL_CHECKPOINT: &str = "model.uim";
pub const BEST_CHECKPOINT: &str = "best.uim";
pub const OPTIMIZER_STATE: &str = "optimizer.uim";
pub const TRAIN_STATE: &str = "state.txt";

fn prepare_out(cfg: &ExperimentConfig) -> Result<()> {
    fs::create_dir_all(&cfg.out)?;
    fs::write(cfg.out.join(RESOLVED_CONFIG), cfg.resolved()?)?;
    Ok(())
}

/// Generates the dataset; returns the manifest's SHA-256.
pub fn gen_data(cfg: &ExperimentConfig) -> Result<String> {
    prepare_out(cfg)?;
    let hash = dataset::generate(cfg, &cfg.dataset_dir())?;
    Ok(format!("dataset {} (manifest sha256 {hash})", cfg.dataset_dir().display()))
}

fn fresh_model(cfg: &ExperimentConfig, task: &Task) -> Result<Model<f32>> {
    let spec = cfg.model_spec(task);
    task.check_model(&spec)?;
    init_params(&spec, cfg.seed)
}

fn save_state(dir: &Path, model: &Model<f32>, state: &TrainState) -> Result<()> {
    let mut entries = Vec::new();
    for (i, name) in model.params.names().iter().enumerate() {
        entries.push((format!("m.{name}"), state.adam.m[i].clone()));
        entries.push((format!("v.{name}"), state.adam.v[i].clone()));
    }
    save_tensors(&dir.join(OPTIMIZER_STATE), &entries)?;
    let text = format!(
        "epoch = {}\nstep = {}\nlr = {:?}\ndrops = {}\n",
        state.epoch, state.adam.step, state.lr, state.drops
    );
    fs::write(dir.join(TRAIN_STATE), text)?;
    Ok(())
}

fn load_state(dir: &Path, model: &Model<f32>) -> Result<TrainState> {
    let text = fs::read_to_string(dir.join(TRAIN_STATE))?;
    let field = |key: &str| -> Result<&str> {
        text.lines()
            .find_map(|l| l.strip_prefix(key).and_then(|r| r.strip_prefix(" = ")))
            .ok_or_else(|| Error::Format(format!("{TRAIN_STATE} lacks {key}")))
    };
    let parse_err = |key: &str| Error::Format(format!("{TRAIN_STATE}: bad {key}"));
    let mut adam = Adam::new(&model.params);
    adam.step = field("step")?.parse().map_err(|_| parse_err("step"))?;
    let mut entries = load_tensors(&dir.join(OPTIMIZER_STATE))?;
    for (i, name) in model.params.names().iter().enumerate() {
        adam.m[i] = take_named(&mut entries, &format!("m.{name}"))?;
        adam.v[i] = take_named(&mut entries, &format!("v.{name}"))?;
        if adam.m[i].shape() != model.params.value(i).shape() || adam.v[i].shape() != model.params.value(i).shape() {
            return Err(Error::Format(format!("optimiser moments of {name} have the wrong shape")));
        }
    }
    Ok(TrainState {
        adam,
        epoch: field("epoch")?.parse().map_err(|_| parse_err("epoch"))?,
        lr: field("lr")?.parse().map_err(|_| parse_err("lr"))?,
        drops: field("drops")?.parse().map_err(|_| parse_err("drops"))?,
    })
}

/// Loads the training data for the configured regime. Unsupervised regimes
/// read only the measurement records.
pub fn load_training_data(cfg: &ExperimentConfig, task: &Task) -> Result<TrainData> {
    let dir = cfg.dataset_dir();
    Manifest::read(&dir)?.check(cfg, task)?;
    Ok(match cfg.regime {
        Regime::Supervised => TrainData::Supervised {
            train: dataset::load_truth(&dir, Split::Train)?,
            val: dataset::load_truth(&dir, Split::Val)?,
        },
        regime => TrainData::Pairs {
            train: dataset::load_pairs(&dir, task, Split::Train, regime)?,
            val: dataset::load_pairs(&dir, task, Split::Val, regime)?,
        },
    })
}

/// Trains from scratch, or from the checkpoint directory `resume`.
pub fn train(cfg: &ExperimentConfig, resume: Option<&Path>) -> Result<String> {
    prepare_out(cfg)?;
    let task = cfg.task()?;
    let data = load_training_data(cfg, &task)?;
    let mut model = fresh_model(cfg, &task)?;
    let state = match resume {
        Some(dir) => {
            load_model(&dir.join(FINAL_CHECKPOINT), &mut model)?;
            Some(load_state(dir, &model)?)
        }
        None => None,
    };
    let mut trainer = Trainer::new(&task, cfg.train_config(&task), model)?;
    if let Some(state) = state {
        trainer = trainer.resume(state)?;
    }
    let outcome = trainer.run(&data, None)?;
    save_model(&cfg.out.join(FINAL_CHECKPOINT), &outcome.model)?;
    save_model(&cfg.out.join(BEST_CHECKPOINT), &outcome.best)?;
    save_state(&cfg.out, &outcome.model, &outcome.state)?;
    fs::write(cfg.out.join("metrics.csv"), outcome.history.to_csv())?;
    let last = outcome.history.records.last();
    Ok(format!(
        "trained {} epochs ({} steps){}; final objective {}",
        outcome.state.epoch,
        outcome.state.adam.step,
        if outcome.history.stopped_early { ", stopped early" } else { "" },
        last.map_or("n/a".into(), |r| format!("{:.6}", r.total)),
    ))
}

fn load_checkpoint(cfg: &ExperimentConfig, task: &Task, checkpoint: &Path) -> Result<Model<f32>> {
    let mut model = fresh_model(cfg, task)?;
    load_model(checkpoint, &mut model)?;
    Ok(model)
}

/// Per-image and mean PSNR on the dataset's evaluation set, plus 8-bit
/// reconstructions.
pub fn eval(cfg: &ExperimentConfig, checkpoint: &Path) -> Result<String> {
    prepare_out(cfg)?;
    let task = cfg.task()?;
    let dir = cfg.dataset_dir();
    Manifest::read(&dir)?.check(cfg, &task)?;
    let model = load_checkpoint(cfg, &task, checkpoint)?;
    let set = dataset::load_eval(&dir, &task)?;
    let report = evaluate(&model, &task, &set)?;
    let out = cfg.out.join("eval");
    fs::create_dir_all(&out)?;
    let mut csv = String::from("image,psnr\n");
    for (i, (p, img)) in report.per_image.iter().zip(&report.reconstructions).enumerate() {
        let _ = writeln!(csv, "{i},{p:.6}");
        write_pgm(&out.join(format!("recon_{i:06}.pgm")), img)?;
    }
    let _ = writeln!(csv, "mean,{:.6}", report.mean);
    fs::write(out.join("psnr.csv"), csv)?;
    Ok(format!("mean PSNR {:.3} dB over {} images", report.mean, report.per_image.len()))
}

/// Reconstructs one image. For deblurring the input is the blurry
/// observation; for compressive sensing it is a latent image, measured with
/// the evaluation operator and the configured noise.
pub fn reconstruct(cfg: &ExperimentConfig, checkpoint: &Path, input: &Path, output: &Path) -> Result<String> {
    let task = cfg.task()?;
    let model = load_checkpoint(cfg, &task, checkpoint)?;
    let img = read_image(input)?.to_gray();
    let (h, w) = task.image();
    if img.shape() != [h, w] {
        return Err(Error::Config(format!("input is {:?}, the model expects {h}x{w}", img.shape())));
    }
    let (op, y): (MeasurementOp, Tensor<f32>) = match &task {
        Task::Compressive { .. } => {
            let mut rng = stream(cfg.seed, "reconstruct", 0);
            let op = task.eval_operator(&mut rng)?;
            let y = measure(&op, &img, cfg.noise(), &mut rng)?;
            (op, y)
        }
        Task::Deblur { kernels, .. } => (ConvolutionOp::delta(kernels.size, kernels.boundary).into(), img),
    };
    let out = model.predict(&task.network_input(&op, &y)?)?;
    write_pgm(output, &task.assemble(&op, &out)?)?;
    Ok(format!("wrote {}", output.display()))
}

/// Eigen-spectrum of `Q` and, for blur kernels, the averaged kernel
/// spectrum.
pub fn analyze_q(cfg: &ExperimentConfig) -> Result<String> {
    prepare_out(cfg)?;
    let task = cfg.task()?;
    let image = task.image();
    let mut rng = stream(cfg.seed, "analysis", 0);
    let dist = if cfg.fixed_operator {
        ParamDistribution::Fixed(task.distribution().sample(&mut rng)?)
    } else {
        task.distribution()
    };
    let (q, sampled) = match gram_exact(&dist, image)? {
        Some(q) => (q, Vec::new()),
        None => {
            let ops = (0..cfg.kernel_samples).map(|_| dist.sample(&mut rng)).collect::<Result<Vec<_>>>()?;
            (gram_from_ops(&ops, image)?, ops)
        }
    };
    let report = q_rank_report(&q, cfg.rank_threshold)?;
    let mut csv = String::from("index,eigenvalue\n");
    for (i, l) in report.eigenvalues.iter().enumerate() {
        let _ = writeln!(csv, "{i},{l:e}");
    }
    fs::write(cfg.out.join("eigenvalues.csv"), csv)?;
    let mut summary = format!(
        "Q: {n}x{n}, rank {} (threshold {:e} of the largest eigenvalue), null space {}, full rank {}\n",
        report.rank,
        cfg.rank_threshold,
        report.null_dim(),
        report.full_rank,
        n = image.0 * image.1,
    );
    let kernels: Vec<ConvolutionOp> = sampled.iter().filter_map(|op| op.as_convolution().cloned()).collect();
    if !kernels.is_empty() {
        let spectrum = kernel_spectrum(&kernels, image)?;
        let mut csv = String::from("row,col,mean_magnitude\n");
        for (i, v) in spectrum.mean.iter().enumerate() {
            let _ = writeln!(csv, "{},{},{v:e}", i / image.1, i % image.1);
        }
        fs::write(cfg.out.join("spectrum.csv"), csv)?;
        let _ = writeln!(
            summary,
            "mean kernel spectrum over {} kernels: min/max {:.4}, all bins positive {}",
            kernels.len(),
            spectrum.min_over_max(),
            spectrum.mean.iter().all(|&v| v > 0.0)
        );
    }
    fs::write(cfg.out.join("summary.txt"), &summary)?;
    Ok(summary.trim_end().to_string())
}

/// The expected-loss identity, the noise floor and the linear oracle on a
/// small compressive-sensing problem with Gaussian images.
pub fn verify_theory(cfg: &ExperimentConfig) -> Result<String> {
    prepare_out(cfg)?;
    let image = (cfg.theory_image, cfg.theory_image);
    let phi = SensingMatrix::random_orthonormal(cfg.theory_rows, cfg.theory_patch, &mut stream(cfg.seed, "phi", 0))?;
    let phi = std::sync::Arc::new(phi);
    let ops = if cfg.rank_deficient {
        let op: MeasurementOp = CompressivePatchOp::new(phi, (0, 0), image)?.into();
        OperatorSet::from_ops(&[op], image)?
    } else {
        let dist = ParamDistribution::ShiftedPartitions { phi, image };
        OperatorSet::from_distribution(&dist, image, 0, &mut stream(cfg.seed, "theory-ops", 0))?
    };
    let px = GaussianImages::banded(image, 0.5, cfg.theory_std, cfg.theory_correlation)?;
    let noise = GaussianNoise::new(cfg.theory_sigma)?;
    let n = cfg.theory_samples;
    let dim = image.0 * image.1;

    let mut rng = stream(cfg.seed, "theory-w", 0);
    let scale = 1.0 / (dim as f64).sqrt();
    let w = DMatrix::from_fn(dim, dim, |_, _| scale * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng));
    let identity = mc_swap_identity(&w, &ops, noise, &px, n, cfg.seed)?;
    let zero = mc_swap_identity(&DMatrix::zeros(dim, dim), &ops, noise, &px, n, cfg.seed)?;
    let closed = zero_estimator_loss(&ops, noise, &px);
    let floor = noise_floor_check(&ops, noise, &px, n, cfg.seed)?;

    let mut csv = String::from("check,quantity,value\n");
    let mut summary = String::new();
    let _ = writeln!(summary, "{identity}");
    let zero_rel = (zero.lhs - closed).abs() / closed;
    let _ = writeln!(
        summary,
        "f = 0: empirical {:.6}, closed form {:.6}, rel_err {:.3e}",
        zero.lhs, closed, zero_rel
    );
    let _ = writeln!(summary, "{floor}");
    for (check, q, v) in [
        ("identity", "lhs", identity.lhs),
        ("identity", "rhs", identity.rhs),
        ("identity", "rel_err", identity.rel_err),
        ("zero", "empirical", zero.lhs),
        ("zero", "closed_form", closed),
        ("zero", "rel_err", zero_rel),
        ("floor", "min_loss", floor.min_loss),
        ("floor", "se", floor.se),
        ("floor", "two_sigma_sq_m", floor.floor),
        ("floor", "within_3se", floor.within as u8 as f64),
    ] {
        let _ = writeln!(csv, "{check},{q},{v:e}");
    }

    let oracle_noise = GaussianNoise::new(cfg.oracle_sigma)?;
    let oracle = linear_oracle(&ops, oracle_noise, &px, cfg.oracle_train, cfg.oracle_eval, cfg.seed);
    let result = match oracle {
        Ok(r) => {
            let _ = writeln!(summary, "{r}");
            for (q, v) in [
                ("psnr_swap", r.psnr_swap),
                ("psnr_supervised", r.psnr_sup),
                ("psnr_gap", r.psnr_gap),
                ("param_dist", r.param_dist),
            ] {
                let _ = writeln!(csv, "oracle,{q},{v:e}");
            }
            Ok(())
        }
        Err(e @ Error::RankDeficient { .. }) => {
            let cmp = eigenspace_comparison(&ops, GaussianNoise::none(), &px, cfg.oracle_train, cfg.seed)?;
            let _ = writeln!(summary, "{cmp}");
            let _ = writeln!(summary, "linear oracle refused: {e}");
            for (q, v) in [
                ("range_rel", cmp.range_rel),
                ("null_rel", cmp.null_rel),
                ("null_dim", cmp.null_dim as f64),
            ] {
                let _ = writeln!(csv, "eigenspaces,{q},{v:e}");
            }
            Err(e)
        }
        Err(e) => Err(e),
    };
    fs::write(cfg.out.join("theory.csv"), csv)?;
    fs::write(cfg.out.join("summary.txt"), &summary)?;
    print!("{summary}");
    result.map(|_| format!("theory report written to {}", cfg.out.display()))
}

/// Task-specific tag used in log lines.
pub fn describe(cfg: &ExperimentConfig) -> String {
    match cfg.task {
        TaskKind::Compressive => format!(
            "cs {}x{} p={} ratio={} regime={}",
            cfg.image,
            cfg.image,
            cfg.patch,
            cfg.ratio,
            cfg.regime.as_str()
        ),
        TaskKind::Deblur => format!(
            "deblur {}x{} k={} regime={}",
            cfg.image,
            cfg.image,
            cfg.kernel,
            cfg.regime.as_str()
        ),
    }
}
