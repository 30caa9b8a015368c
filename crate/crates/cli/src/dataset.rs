//! On-disk paired-measurement datasets.
//!
//! ```text
//! manifest.txt          settings plus one line per record (seed, SHA-256)
//! phi.uim               sensing matrix (compressive sensing only)
//! train/NNNNNN.uim      y1, y2 and, unless blind, operator descriptors
//! train_sealed/         operator descriptors of blind records
//! train_truth/          latent images; read only by supervised training
//! val/ val_sealed/ val_truth/
//! eval/NNNNNN.uim       x, y and the operator of each evaluation image
//! ```
//!
//! Operators are stored as descriptors: a partition offset for compressive
//! sensing, the kernel for blur.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};
use swaptrain::measurement::{
    build_pair_dataset, CompressivePatchOp, ConvolutionOp, MeasurementOp, MeasurementPair, ORTHONORMAL_TOL,
};
use swaptrain::rng::derive_seed;
use swaptrain::synth::image_set;
use swaptrain::training::{EvalSet, Regime, Task};
use swaptrain::{Error, Result, Tensor};

use crate::config::ExperimentConfig;
use crate::io::{load_tensors, read_image, save_tensors, take_named};

pub const MANIFEST: &str = "manifest.txt";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
        }
    }
}

fn record_name(i: usize) -> String {
    format!("{i:06}.uim")
}

fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().fold(String::new(), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

/// SHA-256 of a file's bytes, as lowercase hex.
pub fn file_hash(path: &Path) -> Result<String> {
    Ok(sha256_hex(&fs::read(path)?))
}

fn descriptor(prefix: &str, op: &MeasurementOp) -> (String, Tensor<f32>) {
    match op {
        MeasurementOp::Compressive(cs) => {
            let (a, b) = cs.offset();
            (format!("{prefix}.offset"), Tensor::new(&[2], vec![a as f32, b as f32]).unwrap())
        }
        MeasurementOp::Convolution(k) => (format!("{prefix}.kernel"), k.kernel_tensor()),
    }
}

/// Rebuilds an operator from its stored descriptor. Kernels are
/// renormalised in 64-bit after the 32-bit round trip.
fn operator(task: &Task, entries: &mut Vec<(String, Tensor<f32>)>, prefix: &str) -> Result<MeasurementOp> {
    match task {
        Task::Compressive { phi, image } => {
            let t = take_named(entries, &format!("{prefix}.offset"))?;
            let off = (t.data()[0] as usize, t.data()[1] as usize);
            Ok(CompressivePatchOp::new(phi.clone(), off, *image)?.into())
        }
        Task::Deblur { kernels, .. } => {
            let t = take_named(entries, &format!("{prefix}.kernel"))?;
            let sum: f64 = t.data().iter().map(|&v| v as f64).sum();
            let vals = t.data().iter().map(|&v| v as f64 / sum).collect();
            Ok(ConvolutionOp::new(vals, t.shape()[0], t.shape()[1], kernels.boundary)?.into())
        }
    }
}

/// Latent images for each split: synthetic, or read from the source
/// directory in file-name order and centre-cropped to the image size.
fn source_images(cfg: &ExperimentConfig) -> Result<[Vec<Tensor<f32>>; 3]> {
    let (n, counts) = (cfg.image, [cfg.train_count, cfg.val_count, cfg.eval_count]);
    if cfg.source == "synthetic" {
        return Ok([
            image_set(counts[0], n, n, cfg.seed, "train"),
            image_set(counts[1], n, n, cfg.seed, "val"),
            image_set(counts[2], n, n, cfg.seed, "test"),
        ]);
    }
    let dir = Path::new(&cfg.source);
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::Config(format!("cannot read image directory {}: {e}", dir.display())))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "pgm" || x == "ppm"))
        .collect();
    files.sort();
    let needed: usize = counts.iter().sum();
    if files.len() < needed {
        return Err(Error::Config(format!(
            "{} holds {} PGM/PPM images, {needed} needed",
            dir.display(),
            files.len()
        )));
    }
    let mut images = files[..needed]
        .iter()
        .map(|p| {
            let img = read_image(p)?;
            if img.height < n || img.width < n {
                return Err(Error::Format(format!(
                    "{} is {}x{}, smaller than {n}x{n}",
                    p.display(),
                    img.height,
                    img.width
                )));
            }
            let g = img.to_gray();
            let (r0, c0) = ((img.height - n) / 2, (img.width - n) / 2);
            let data = (r0..r0 + n)
                .flat_map(|r| (c0..c0 + n).map(move |c| r * img.width + c))
                .map(|i| g.data()[i])
                .collect();
            Tensor::new(&[n, n], data)
        })
        .collect::<Result<Vec<_>>>()?
        .into_iter();
    let mut take = |k| images.by_ref().take(k).collect::<Vec<_>>();
    Ok([take(counts[0]), take(counts[1]), take(counts[2])])
}

/// Writes a dataset and returns the SHA-256 of its manifest. Blind regimes
/// move operator descriptors into the sealed sidecar.
pub fn generate(cfg: &ExperimentConfig, dir: &Path) -> Result<String> {
    let task = cfg.task()?;
    let noise = cfg.noise();
    let dist = task.distribution();
    let blind = cfg.regime == Regime::UnsupBlind;
    let [train, val, eval] = source_images(cfg)?;
    fs::create_dir_all(dir)?;

    let mut manifest = String::new();
    let m = &mut manifest;
    let _ = writeln!(m, "format = {FORMAT_VERSION}");
    let _ = writeln!(m, "task = {}", cfg.task.as_str());
    let _ = writeln!(m, "regime = {}", cfg.regime.as_str());
    let _ = writeln!(m, "seed = {}", cfg.seed);
    let _ = writeln!(m, "image = {}", cfg.image);
    match &task {
        Task::Compressive { phi, .. } => {
            let _ = writeln!(m, "patch = {}", phi.patch());
            let _ = writeln!(m, "rows = {}", phi.rows());
            let phi_t = ("phi".to_string(), phi.to_tensor::<f32>());
            save_tensors(&dir.join("phi.uim"), &[phi_t])?;
            let _ = writeln!(m, "phi = phi.uim {}", file_hash(&dir.join("phi.uim"))?);
        }
        Task::Deblur { kernels, .. } => {
            let _ = writeln!(m, "kernel = {}", kernels.size);
        }
    }
    let _ = writeln!(m, "sigma = {:?}", noise.sigma());
    let _ = writeln!(m, "counts = {} {} {}", train.len(), val.len(), eval.len());

    for (split, images) in [(Split::Train, &train), (Split::Val, &val)] {
        let name = split.as_str();
        let pair_seed = derive_seed(cfg.seed, &format!("pairs-{name}"), 0);
        let pairs = if images.is_empty() {
            Vec::new()
        } else {
            build_pair_dataset(images, &dist, noise, pair_seed, false, cfg.threads)?
        };
        let records = dir.join(name);
        let sealed = dir.join(format!("{name}_sealed"));
        let truth = dir.join(format!("{name}_truth"));
        for d in [&records, &truth] {
            recreate(d)?;
        }
        if blind {
            recreate(&sealed)?;
        } else if sealed.exists() {
            fs::remove_dir_all(&sealed)?;
        }
        for (i, (pair, x)) in pairs.iter().zip(images.iter()).enumerate() {
            let (t1, t2) = pair.thetas().expect("generated pairs carry operators");
            let descriptors = vec![descriptor("theta1", t1), descriptor("theta2", t2)];
            let mut entries = vec![("y1".to_string(), pair.y1.clone()), ("y2".to_string(), pair.y2.clone())];
            let file = record_name(i);
            if blind {
                save_tensors(&sealed.join(&file), &descriptors)?;
            } else {
                entries.extend(descriptors);
            }
            save_tensors(&records.join(&file), &entries)?;
            save_tensors(&truth.join(&file), &[("x".to_string(), x.clone())])?;
            let _ = writeln!(
                m,
                "record {name} {i} seed={} sha256={}",
                derive_seed(pair_seed, "pair", i as u64),
                file_hash(&records.join(&file))?
            );
        }
    }

    let eval_seed = derive_seed(cfg.seed, "eval-set", 0);
    let set = EvalSet::new(&task, eval, noise, eval_seed)?;
    let eval_dir = dir.join("eval");
    recreate(&eval_dir)?;
    for (i, (x, (op, y))) in set.images.iter().zip(&set.measurements).enumerate() {
        let file = record_name(i);
        let entries = vec![("x".to_string(), x.clone()), ("y".to_string(), y.clone()), descriptor("theta", op)];
        save_tensors(&eval_dir.join(&file), &entries)?;
        let _ = writeln!(
            m,
            "record eval {i} seed={} sha256={}",
            derive_seed(eval_seed, "eval", i as u64),
            file_hash(&eval_dir.join(&file))?
        );
    }
    fs::write(dir.join(MANIFEST), &manifest)?;
    Ok(sha256_hex(manifest.as_bytes()))
}

fn recreate(d: &Path) -> Result<()> {
    if d.exists() {
        fs::remove_dir_all(d)?;
    }
    fs::create_dir_all(d)?;
    Ok(())
}

/// Header settings of a manifest, keyed by name.
#[derive(Clone, Debug)]
pub struct Manifest {
    pub settings: Vec<(String, String)>,
    pub records: Vec<(String, usize)>,
}

impl Manifest {
    pub fn read(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST);
        let text = fs::read_to_string(&path)
            .map_err(|e| Error::Format(format!("cannot read {}: {e}", path.display())))?;
        let mut settings = Vec::new();
        let mut records = Vec::new();
        for line in text.lines() {
            if let Some(rest) = line.strip_prefix("record ") {
                let mut parts = rest.split_whitespace();
                let split = parts.next().unwrap_or_default().to_string();
                let index = parts
                    .next()
                    .and_then(|s| s.parse().ok())
                    .ok_or_else(|| Error::Format(format!("bad manifest line {line:?}")))?;
                records.push((split, index));
            } else if let Some((k, v)) = line.split_once(" = ") {
                settings.push((k.to_string(), v.to_string()));
            } else if !line.trim().is_empty() {
                return Err(Error::Format(format!("bad manifest line {line:?}")));
            }
        }
        Ok(Manifest { settings, records })
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.settings.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn count(&self, split: &str) -> usize {
        self.records.iter().filter(|(s, _)| s == split).count()
    }

    /// Fails unless the dataset was generated for the same measurement task.
    pub fn check(&self, cfg: &ExperimentConfig, task: &Task) -> Result<()> {
        let mut expect = vec![
            ("format", FORMAT_VERSION.to_string()),
            ("task", cfg.task.as_str().to_string()),
            ("image", cfg.image.to_string()),
            ("sigma", format!("{:?}", cfg.noise().sigma())),
        ];
        match task {
            Task::Compressive { phi, .. } => {
                expect.push(("patch", phi.patch().to_string()));
                expect.push(("rows", phi.rows().to_string()));
                expect.push(("seed", cfg.seed.to_string()));
            }
            Task::Deblur { kernels, .. } => expect.push(("kernel", kernels.size.to_string())),
        }
        for (k, v) in expect {
            match self.get(k) {
                Some(found) if found == v => {}
                found => {
                    return Err(Error::Config(format!(
                        "dataset was generated with {k} = {}, config has {v}",
                        found.unwrap_or("<missing>")
                    )))
                }
            }
        }
        Ok(())
    }
}

/// Checks that the stored sensing matrix is the one the config derives.
fn check_phi(dir: &Path, task: &Task) -> Result<()> {
    if let Task::Compressive { phi, .. } = task {
        let mut entries = load_tensors(&dir.join("phi.uim"))?;
        let stored = take_named(&mut entries, "phi")?;
        let expected = phi.to_tensor::<f32>();
        let diff = stored
            .data()
            .iter()
            .zip(expected.data())
            .map(|(a, b)| (a - b).abs() as f64)
            .fold(0.0, f64::max);
        if stored.shape() != expected.shape() || diff > ORTHONORMAL_TOL {
            return Err(Error::Config("stored sensing matrix differs from the configured one".into()));
        }
    }
    Ok(())
}

/// Measurement pairs of a split. Only the record directory is read:
/// never the truth directory, and never the sealed sidecar. Blind regimes
/// drop any stored operators.
pub fn load_pairs(dir: &Path, task: &Task, split: Split, regime: Regime) -> Result<Vec<MeasurementPair>> {
    check_phi(dir, task)?;
    let manifest = Manifest::read(dir)?;
    let n = manifest.count(split.as_str());
    (0..n)
        .map(|i| {
            let path = dir.join(split.as_str()).join(record_name(i));
            let mut entries = load_tensors(&path)?;
            let y1 = take_named(&mut entries, "y1")?;
            let y2 = take_named(&mut entries, "y2")?;
            let theta = match regime {
                Regime::UnsupBlind => None,
                _ => {
                    if entries.is_empty() {
                        return Err(Error::Regime(format!(
                            "{} has no operators; the dataset was generated for blind training",
                            path.display()
                        )));
                    }
                    Some((operator(task, &mut entries, "theta1")?, operator(task, &mut entries, "theta2")?))
                }
            };
            MeasurementPair::new(y1, y2, theta, None)
        })
        .collect()
}

/// Latent images of a split, for supervised training only.
pub fn load_truth(dir: &Path, split: Split) -> Result<Vec<Tensor<f32>>> {
    let manifest = Manifest::read(dir)?;
    (0..manifest.count(split.as_str()))
        .map(|i| {
            let mut entries = load_tensors(&dir.join(format!("{}_truth", split.as_str())).join(record_name(i)))?;
            take_named(&mut entries, "x")
        })
        .collect()
}

/// The measured evaluation set, ground truth included.
pub fn load_eval(dir: &Path, task: &Task) -> Result<EvalSet> {
    check_phi(dir, task)?;
    let manifest = Manifest::read(dir)?;
    let mut images = Vec::new();
    let mut measurements = Vec::new();
    for i in 0..manifest.count("eval") {
        let mut entries = load_tensors(&dir.join("eval").join(record_name(i)))?;
        images.push(take_named(&mut entries, "x")?);
        let y = take_named(&mut entries, "y")?;
        measurements.push((operator(task, &mut entries, "theta")?, y));
    }
    Ok(EvalSet { images, measurements })
}
