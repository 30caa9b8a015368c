//! Flat `key = value` experiment configuration with `[section]` headers.
//! Unknown sections and keys are rejected; `#` starts a comment.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use swaptrain::losses::{LossKind, LossWeights};
use swaptrain::measurement::GaussianNoise;
use swaptrain::models::ModelSpec;
use swaptrain::training::{Regime, Task, TrainConfig};
use swaptrain::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TaskKind {
    Compressive,
    Deblur,
}

impl TaskKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "cs" | "compressive" => Ok(TaskKind::Compressive),
            "deblur" => Ok(TaskKind::Deblur),
            _ => Err(Error::Config(format!("unknown task {s:?} (expected cs or deblur)"))),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            TaskKind::Compressive => "cs",
            TaskKind::Deblur => "deblur",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub task: TaskKind,
    pub regime: Regime,
    pub seed: u64,
    pub out: PathBuf,
    pub threads: usize,

    pub image: usize,
    pub patch: usize,
    pub ratio: f64,
    pub kernel: usize,
    /// Noise standard deviation in intensity units; defaults to 2/255 for
    /// deblurring and 0 for compressive sensing.
    pub sigma: Option<f64>,

    /// `synthetic`, or a directory of PGM/PPM images.
    pub source: String,
    /// Defaults to `<out>/data`.
    pub dataset: Option<PathBuf>,
    pub train_count: usize,
    pub val_count: usize,
    pub eval_count: usize,

    pub widths: Option<Vec<usize>>,
    pub residual: bool,

    pub lr: f64,
    pub lr_drops: usize,
    pub plateau_patience: usize,
    pub plateau_tol: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub max_steps: Option<u64>,
    pub eval_interval: usize,
    pub gamma: Option<f64>,
    pub alpha: Option<f64>,
    pub beta: Option<f64>,
    pub rho: Option<LossKind>,
    pub proxy_warmup_epochs: usize,
    pub detach_kernel_estimate: bool,
    pub check_isolation: bool,

    pub kernel_samples: usize,
    pub fixed_operator: bool,
    pub rank_threshold: f64,

    pub theory_image: usize,
    pub theory_patch: usize,
    pub theory_rows: usize,
    pub theory_samples: usize,
    pub theory_sigma: f64,
    pub oracle_sigma: f64,
    pub oracle_train: usize,
    pub oracle_eval: usize,
    pub theory_std: f64,
    pub theory_correlation: f64,
    pub rank_deficient: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            task: TaskKind::Compressive,
            regime: Regime::UnsupNonBlind,
            seed: 0,
            out: PathBuf::from("runs/default"),
            threads: 1,
            image: 32,
            patch: 8,
            ratio: 0.25,
            kernel: 5,
            sigma: None,
            source: "synthetic".into(),
            dataset: None,
            train_count: 2048,
            val_count: 256,
            eval_count: 64,
            widths: None,
            residual: true,
            lr: 1e-3,
            lr_drops: 2,
            plateau_patience: 5,
            plateau_tol: 1e-3,
            batch_size: 16,
            max_epochs: 100,
            max_steps: None,
            eval_interval: 1,
            gamma: None,
            alpha: None,
            beta: None,
            rho: None,
            proxy_warmup_epochs: 0,
            detach_kernel_estimate: true,
            check_isolation: false,
            kernel_samples: 1000,
            fixed_operator: false,
            rank_threshold: 1e-8,
            theory_image: 4,
            theory_patch: 2,
            theory_rows: 3,
            theory_samples: 100_000,
            theory_sigma: 0.05,
            oracle_sigma: 0.01,
            oracle_train: 10_000,
            oracle_eval: 10_000,
            theory_std: 0.2,
            theory_correlation: 0.7,
            rank_deficient: false,
        }
    }
}

struct Entries {
    map: BTreeMap<(String, String), (String, usize)>,
}

impl Entries {
    fn parse(text: &str) -> Result<Self> {
        let mut map = BTreeMap::new();
        let mut section = String::new();
        for (i, raw) in text.lines().enumerate() {
            let line_no = i + 1;
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if let Some(rest) = line.strip_prefix('[') {
                let name = rest
                    .strip_suffix(']')
                    .ok_or_else(|| Error::Config(format!("line {line_no}: unterminated section header")))?;
                section = name.trim().to_string();
                if !SECTIONS.contains(&section.as_str()) {
                    return Err(Error::Config(format!("line {line_no}: unknown section [{section}]")));
                }
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {line_no}: expected key = value")))?;
            let key = (section.clone(), key.trim().to_string());
            if map.insert(key.clone(), (value.trim().to_string(), line_no)).is_some() {
                return Err(Error::Config(format!("line {line_no}: duplicate key {}", qualified(&key))));
            }
        }
        Ok(Entries { map })
    }

    fn take<T>(&mut self, section: &str, key: &str, parse: impl Fn(&str) -> Result<T>) -> Result<Option<T>> {
        match self.map.remove(&(section.to_string(), key.to_string())) {
            None => Ok(None),
            Some((v, line)) => parse(&v)
                .map(Some)
                .map_err(|e| Error::Config(format!("line {line}: {section}.{key}: {e}"))),
        }
    }

    fn set<T>(&mut self, section: &str, key: &str, slot: &mut T, parse: impl Fn(&str) -> Result<T>) -> Result<()> {
        if let Some(v) = self.take(section, key, parse)? {
            *slot = v;
        }
        Ok(())
    }

    fn finish(self) -> Result<()> {
        match self.map.iter().next() {
            None => Ok(()),
            Some((key, (_, line))) => Err(Error::Config(format!("line {line}: unknown key {}", qualified(key)))),
        }
    }
}

const SECTIONS: &[&str] = &["experiment", "measurement", "data", "model", "train", "analysis", "theory"];

fn qualified((section, key): &(String, String)) -> String {
    if section.is_empty() {
        key.clone()
    } else {
        format!("{section}.{key}")
    }
}

fn num<T: FromStr>(s: &str) -> Result<T> {
    s.parse().map_err(|_| Error::Config(format!("cannot parse {s:?}")))
}

fn boolean(s: &str) -> Result<bool> {
    match s {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => Err(Error::Config(format!("expected true or false, got {s:?}"))),
    }
}

fn list(s: &str) -> Result<Vec<usize>> {
    s.split(',').map(|p| num(p.trim())).collect()
}

fn opt_steps(s: &str) -> Result<Option<u64>> {
    match s {
        "none" => Ok(None),
        _ => num(s).map(Some),
    }
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut e = Entries::parse(text)?;
        let mut c = ExperimentConfig::default();
        e.set("experiment", "task", &mut c.task, TaskKind::parse)?;
        e.set("experiment", "regime", &mut c.regime, Regime::parse)?;
        e.set("experiment", "seed", &mut c.seed, num)?;
        e.set("experiment", "out", &mut c.out, |s| Ok(PathBuf::from(s)))?;
        e.set("experiment", "threads", &mut c.threads, num)?;

        e.set("measurement", "image", &mut c.image, num)?;
        e.set("measurement", "patch", &mut c.patch, num)?;
        e.set("measurement", "ratio", &mut c.ratio, num)?;
        e.set("measurement", "kernel", &mut c.kernel, num)?;
        c.sigma = e.take("measurement", "sigma", num)?.or(c.sigma);

        e.set("data", "source", &mut c.source, |s| Ok(s.to_string()))?;
        c.dataset = e.take("data", "dataset", |s| Ok(PathBuf::from(s)))?;
        e.set("data", "train", &mut c.train_count, num)?;
        e.set("data", "val", &mut c.val_count, num)?;
        e.set("data", "eval", &mut c.eval_count, num)?;

        c.widths = e.take("model", "widths", list)?;
        e.set("model", "residual", &mut c.residual, boolean)?;

        e.set("train", "lr", &mut c.lr, num)?;
        e.set("train", "lr_drops", &mut c.lr_drops, num)?;
        e.set("train", "plateau_patience", &mut c.plateau_patience, num)?;
        e.set("train", "plateau_tol", &mut c.plateau_tol, num)?;
        e.set("train", "batch_size", &mut c.batch_size, num)?;
        e.set("train", "max_epochs", &mut c.max_epochs, num)?;
        e.set("train", "max_steps", &mut c.max_steps, opt_steps)?;
        e.set("train", "eval_interval", &mut c.eval_interval, num)?;
        c.gamma = e.take("train", "gamma", num)?;
        c.alpha = e.take("train", "alpha", num)?;
        c.beta = e.take("train", "beta", num)?;
        c.rho = e.take("train", "rho", LossKind::parse)?;
        e.set("train", "proxy_warmup_epochs", &mut c.proxy_warmup_epochs, num)?;
        e.set("train", "detach_kernel_estimate", &mut c.detach_kernel_estimate, boolean)?;
        e.set("train", "check_isolation", &mut c.check_isolation, boolean)?;

        e.set("analysis", "kernel_samples", &mut c.kernel_samples, num)?;
        e.set("analysis", "fixed_operator", &mut c.fixed_operator, boolean)?;
        e.set("analysis", "rank_threshold", &mut c.rank_threshold, num)?;

        e.set("theory", "image", &mut c.theory_image, num)?;
        e.set("theory", "patch", &mut c.theory_patch, num)?;
        e.set("theory", "rows", &mut c.theory_rows, num)?;
        e.set("theory", "samples", &mut c.theory_samples, num)?;
        e.set("theory", "sigma", &mut c.theory_sigma, num)?;
        e.set("theory", "oracle_sigma", &mut c.oracle_sigma, num)?;
        e.set("theory", "oracle_train", &mut c.oracle_train, num)?;
        e.set("theory", "oracle_eval", &mut c.oracle_eval, num)?;
        e.set("theory", "std", &mut c.theory_std, num)?;
        e.set("theory", "correlation", &mut c.theory_correlation, num)?;
        e.set("theory", "rank_deficient", &mut c.rank_deficient, boolean)?;
        e.finish()?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.threads == 0 {
            return bad("threads must be >= 1".into());
        }
        if self.image == 0 || self.train_count == 0 {
            return bad("image size and train count must be positive".into());
        }
        if !(self.ratio > 0.0 && self.ratio <= 1.0) {
            return bad(format!("ratio must lie in (0, 1], got {}", self.ratio));
        }
        if self.task == TaskKind::Compressive && (self.patch < 2 || self.patch > self.image) {
            return bad(format!("patch {} does not fit image {}", self.patch, self.image));
        }
        if self.task == TaskKind::Deblur && (self.kernel == 0 || self.kernel % 2 == 0 || self.kernel > self.image) {
            return bad(format!("kernel size must be odd and at most the image size, got {}", self.kernel));
        }
        if let Some(s) = self.sigma {
            GaussianNoise::new(s)?;
        }
        self.train_config(&self.task()?).validate()
    }

    pub fn noise(&self) -> GaussianNoise {
        let default = match self.task {
            TaskKind::Compressive => 0.0,
            TaskKind::Deblur => GaussianNoise::TWO_GRAY_LEVELS,
        };
        GaussianNoise::new(self.sigma.unwrap_or(default)).expect("validated")
    }

    pub fn dataset_dir(&self) -> PathBuf {
        self.dataset.clone().unwrap_or_else(|| self.out.join("data"))
    }

    /// The measurement task; `Φ` is drawn from the experiment seed.
    pub fn task(&self) -> Result<Task> {
        match self.task {
            TaskKind::Compressive => Task::compressive((self.image, self.image), self.patch, self.ratio, self.seed),
            TaskKind::Deblur => Ok(Task::deblur((self.image, self.image), self.kernel)),
        }
    }

    pub fn model_spec(&self, task: &Task) -> ModelSpec {
        let mut spec = task.default_model();
        match &mut spec {
            ModelSpec::Cs(c) => {
                if let Some(w) = &self.widths {
                    c.widths = w.clone();
                }
            }
            ModelSpec::Deblur(c) => {
                if let Some(w) = &self.widths {
                    c.widths = w.clone();
                }
                c.residual = self.residual;
            }
        }
        spec
    }

    pub fn train_config(&self, task: &Task) -> TrainConfig {
        let mut t = TrainConfig::new(self.regime, task);
        let LossWeights { gamma, alpha, beta } = t.weights;
        t.weights = LossWeights {
            gamma: self.gamma.unwrap_or(gamma),
            // Only blind training estimates a kernel, so shipped blind
            // configs can be rerun under the reference regimes.
            alpha: match self.regime {
                Regime::UnsupBlind => self.alpha.unwrap_or(alpha),
                _ => alpha,
            },
            beta: self.beta.unwrap_or(beta),
        };
        t.rho = self.rho.unwrap_or(t.rho);
        t.lr = self.lr;
        t.lr_drops = self.lr_drops;
        t.plateau_patience = self.plateau_patience;
        t.plateau_tol = self.plateau_tol;
        t.batch_size = self.batch_size;
        t.max_epochs = self.max_epochs;
        t.max_steps = self.max_steps;
        t.seed = self.seed;
        t.eval_interval = self.eval_interval;
        t.proxy_warmup_epochs = self.proxy_warmup_epochs;
        t.detach_kernel_estimate = self.detach_kernel_estimate;
        t.check_isolation = self.check_isolation;
        t.noise = self.noise();
        t
    }

    /// Every setting with defaults filled in; parses back to the same
    /// effective configuration.
    pub fn resolved(&self) -> Result<String> {
        let task = self.task()?;
        let t = self.train_config(&task);
        let spec = self.model_spec(&task);
        let widths = match &spec {
            ModelSpec::Cs(c) => &c.widths,
            ModelSpec::Deblur(c) => &c.widths,
        };
        let widths = widths.iter().map(|w| w.to_string()).collect::<Vec<_>>().join(",");
        let mut s = String::new();
        let w = &mut s;
        let _ = writeln!(w, "[experiment]");
        let _ = writeln!(w, "task = {}", self.task.as_str());
        let _ = writeln!(w, "regime = {}", self.regime.as_str());
        let _ = writeln!(w, "seed = {}", self.seed);
        let _ = writeln!(w, "out = {}", self.out.display());
        let _ = writeln!(w, "threads = {}", self.threads);
        let _ = writeln!(w, "\n[measurement]");
        let _ = writeln!(w, "image = {}", self.image);
        let _ = writeln!(w, "patch = {}", self.patch);
        let _ = writeln!(w, "ratio = {:?}", self.ratio);
        let _ = writeln!(w, "kernel = {}", self.kernel);
        let _ = writeln!(w, "sigma = {:?}", self.noise().sigma());
        let _ = writeln!(w, "\n[data]");
        let _ = writeln!(w, "source = {}", self.source);
        let _ = writeln!(w, "dataset = {}", self.dataset_dir().display());
        let _ = writeln!(w, "train = {}", self.train_count);
        let _ = writeln!(w, "val = {}", self.val_count);
        let _ = writeln!(w, "eval = {}", self.eval_count);
        let _ = writeln!(w, "\n[model]");
        let _ = writeln!(w, "widths = {widths}");
        let _ = writeln!(w, "residual = {}", self.residual);
        let _ = writeln!(w, "\n[train]");
        let _ = writeln!(w, "lr = {:?}", t.lr);
        let _ = writeln!(w, "lr_drops = {}", t.lr_drops);
        let _ = writeln!(w, "plateau_patience = {}", t.plateau_patience);
        let _ = writeln!(w, "plateau_tol = {:?}", t.plateau_tol);
        let _ = writeln!(w, "batch_size = {}", t.batch_size);
        let _ = writeln!(w, "max_epochs = {}", t.max_epochs);
        let _ = writeln!(w, "max_steps = {}", t.max_steps.map_or("none".into(), |m| m.to_string()));
        let _ = writeln!(w, "eval_interval = {}", t.eval_interval);
        let _ = writeln!(w, "gamma = {:?}", t.weights.gamma);
        let _ = writeln!(w, "alpha = {:?}", t.weights.alpha);
        let _ = writeln!(w, "beta = {:?}", t.weights.beta);
        let _ = writeln!(w, "rho = {}", t.rho.as_str());
        let _ = writeln!(w, "proxy_warmup_epochs = {}", t.proxy_warmup_epochs);
        let _ = writeln!(w, "detach_kernel_estimate = {}", t.detach_kernel_estimate);
        let _ = writeln!(w, "check_isolation = {}", t.check_isolation);
        let _ = writeln!(w, "\n[analysis]");
        let _ = writeln!(w, "kernel_samples = {}", self.kernel_samples);
        let _ = writeln!(w, "fixed_operator = {}", self.fixed_operator);
        let _ = writeln!(w, "rank_threshold = {:?}", self.rank_threshold);
        let _ = writeln!(w, "\n[theory]");
        let _ = writeln!(w, "image = {}", self.theory_image);
        let _ = writeln!(w, "patch = {}", self.theory_patch);
        let _ = writeln!(w, "rows = {}", self.theory_rows);
        let _ = writeln!(w, "samples = {}", self.theory_samples);
        let _ = writeln!(w, "sigma = {:?}", self.theory_sigma);
        let _ = writeln!(w, "oracle_sigma = {:?}", self.oracle_sigma);
        let _ = writeln!(w, "oracle_train = {}", self.oracle_train);
        let _ = writeln!(w, "oracle_eval = {}", self.oracle_eval);
        let _ = writeln!(w, "std = {:?}", self.theory_std);
        let _ = writeln!(w, "correlation = {:?}", self.theory_correlation);
        let _ = writeln!(w, "rank_deficient = {}", self.rank_deficient);
        Ok(s)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_keys_are_rejected() {
        let err = ExperimentConfig::parse("[train]\nlearning_rate = 0.1\n").unwrap_err();
        assert!(err.to_string().contains("train.learning_rate"), "{err}");
        let err = ExperimentConfig::parse("[optimizer]\n").unwrap_err();
        assert!(err.to_string().contains("unknown section"), "{err}");
        assert!(ExperimentConfig::parse("seed = 3\n").is_err());
    }

    #[test]
    fn duplicate_keys_are_rejected() {
        assert!(ExperimentConfig::parse("[experiment]\nseed = 1\nseed = 2\n").is_err());
    }

    #[test]
    fn defaults_follow_task_and_regime() {
        let c = ExperimentConfig::parse("[experiment]\ntask = deblur\nregime = unsup-blind\n").unwrap();
        let t = c.train_config(&c.task().unwrap());
        assert_eq!((t.weights.gamma, t.weights.alpha, t.weights.beta), (1.0, 1.0, 1.0));
        assert_eq!(t.rho, LossKind::L1);
        assert!((t.noise.sigma() - 2.0 / 255.0).abs() < 1e-15);
        let c = ExperimentConfig::parse("# compressive\n[experiment]\ntask = cs\n").unwrap();
        let t = c.train_config(&c.task().unwrap());
        assert_eq!(t.weights.gamma, 0.05);
        assert_eq!(t.noise.sigma(), 0.0);
    }

    #[test]
    fn resolved_config_parses_back() {
        let c = ExperimentConfig::parse(
            "[experiment]\ntask = deblur\nregime = unsup-blind\nseed = 9\n[train]\nmax_steps = 30\nbeta = 0.5\n",
        )
        .unwrap();
        let text = c.resolved().unwrap();
        let back = ExperimentConfig::parse(&text).unwrap();
        assert_eq!(back.resolved().unwrap(), text);
        assert_eq!(back.max_steps, Some(30));
        assert_eq!(back.beta, Some(0.5));
    }

    #[test]
    fn invalid_values_name_the_line() {
        let err = ExperimentConfig::parse("[measurement]\nratio = lots\n").unwrap_err();
        assert!(err.to_string().contains("line 2"), "{err}");
        assert!(ExperimentConfig::parse("[measurement]\nratio = 1.5\n").is_err());
    }

    #[test]
    fn kernel_proxy_weight_is_ignored_outside_blind_training() {
        for regime in ["supervised", "unsup-nonblind"] {
            let cfg = ExperimentConfig::parse(&format!("[experiment]\ntask = deblur\nregime = {regime}\n[train]\nalpha = 1\n")).unwrap();
            assert_eq!(cfg.train_config(&cfg.task().unwrap()).weights.alpha, 0.0);
        }
    }
}
