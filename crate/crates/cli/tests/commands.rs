use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use swaptrain::training::{psnr, Regime};
use swaptrain::Error;
use swaptrain_cli::commands;
use swaptrain_cli::config::{ExperimentConfig, TaskKind};
use swaptrain_cli::dataset::{self, Manifest, Split};
use swaptrain_cli::io::load_tensors;

fn configs_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn shipped(name: &str, out: &Path) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::load(&configs_dir().join(name)).unwrap();
    cfg.out = out.to_path_buf();
    cfg.dataset = None;
    cfg
}

fn tiny(out: &Path, task: TaskKind, regime: Regime) -> ExperimentConfig {
    ExperimentConfig {
        task,
        regime,
        out: out.to_path_buf(),
        image: 16,
        train_count: 8,
        val_count: 4,
        eval_count: 3,
        widths: Some(vec![4, 8]),
        max_epochs: 2,
        batch_size: 4,
        ..ExperimentConfig::default()
    }
}

fn files_in(dir: &Path) -> usize {
    fs::read_dir(dir).map_or(0, |d| d.count())
}

#[test]
fn every_shipped_config_parses_and_round_trips() {
    let mut n = 0;
    for entry in fs::read_dir(configs_dir()).unwrap() {
        let path = entry.unwrap().path();
        let cfg = ExperimentConfig::load(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
        let resolved = cfg.resolved().unwrap();
        let again = ExperimentConfig::parse(&resolved).unwrap().resolved().unwrap();
        assert_eq!(again, resolved, "{}", path.display());
        n += 1;
    }
    assert!(n >= 5);
}

#[test]
fn gen_data_writes_one_record_per_image_with_two_measurements() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny(dir.path(), TaskKind::Compressive, Regime::UnsupNonBlind);
    cfg.train_count = 64;
    commands::gen_data(&cfg).unwrap();
    let data = cfg.dataset_dir();
    assert_eq!(Manifest::read(&data).unwrap().count("train"), 64);
    assert_eq!(files_in(&data.join("train")), 64);
    let mut measurements = 0;
    for i in 0..64 {
        let entries = load_tensors(&data.join("train").join(format!("{i:06}.uim"))).unwrap();
        measurements += entries.iter().filter(|(n, _)| n == "y1" || n == "y2").count();
    }
    assert_eq!(measurements, 128);
    assert!(dir.path().join(commands::RESOLVED_CONFIG).exists());
}

#[test]
fn same_seed_gives_identical_manifest_regardless_of_threads() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let cfg_a = tiny(a.path(), TaskKind::Deblur, Regime::UnsupNonBlind);
    let mut cfg_b = tiny(b.path(), TaskKind::Deblur, Regime::UnsupNonBlind);
    cfg_b.threads = 3;
    let ha = dataset::generate(&cfg_a, &cfg_a.dataset_dir()).unwrap();
    let hb = dataset::generate(&cfg_b, &cfg_b.dataset_dir()).unwrap();
    assert_eq!(ha, hb);
    let mut cfg_c = cfg_a.clone();
    cfg_c.seed = 1;
    cfg_c.out = a.path().join("other");
    assert_ne!(ha, dataset::generate(&cfg_c, &cfg_c.dataset_dir()).unwrap());
}

#[test]
fn blind_datasets_seal_operators_away_from_the_records() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(dir.path(), TaskKind::Deblur, Regime::UnsupBlind);
    commands::gen_data(&cfg).unwrap();
    let data = cfg.dataset_dir();
    let record = load_tensors(&data.join("train/000000.uim")).unwrap();
    let names: Vec<&str> = record.iter().map(|(n, _)| n.as_str()).collect();
    assert_eq!(names, ["y1", "y2"]);
    let sealed = load_tensors(&data.join("train_sealed/000000.uim")).unwrap();
    assert!(sealed.iter().any(|(n, _)| n.starts_with("theta1")));
    let task = cfg.task().unwrap();
    assert!(matches!(
        dataset::load_pairs(&data, &task, Split::Train, Regime::UnsupNonBlind),
        Err(Error::Regime(_))
    ));
    let pairs = dataset::load_pairs(&data, &task, Split::Train, Regime::UnsupBlind).unwrap();
    assert!(pairs.iter().all(|p| p.thetas().is_none() && p.x_eval().is_none()));
}

#[test]
fn unsupervised_training_runs_without_any_ground_truth_on_disk() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(dir.path(), TaskKind::Compressive, Regime::UnsupNonBlind);
    commands::gen_data(&cfg).unwrap();
    let data = cfg.dataset_dir();
    for d in ["train_truth", "val_truth", "eval"] {
        fs::remove_dir_all(data.join(d)).unwrap();
    }
    commands::train(&cfg, None).unwrap();
    assert!(dir.path().join(commands::FINAL_CHECKPOINT).exists());
    let mut sup = cfg.clone();
    sup.regime = Regime::Supervised;
    assert!(commands::train(&sup, None).is_err());
}

#[test]
fn smoke_config_trains_quickly_and_resumes_the_step_count() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = shipped("smoke.cfg", dir.path());
    commands::gen_data(&cfg).unwrap();
    let t = Instant::now();
    commands::train(&cfg, None).unwrap();
    let secs = t.elapsed().as_secs_f64();
    eprintln!("smoke training took {secs:.1} s");
    assert!(secs < 120.0);
    let state = fs::read_to_string(dir.path().join(commands::TRAIN_STATE)).unwrap();
    assert!(state.contains("epoch = 5\n") && state.contains("step = 10\n"), "{state}");
    let metrics = fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
    assert_eq!(metrics.lines().count(), 6);
    assert!(!metrics.contains("NaN") && !metrics.contains("inf"));

    let mut more = cfg.clone();
    more.out = dir.path().join("resumed");
    more.dataset = Some(cfg.dataset_dir());
    more.max_epochs = 7;
    commands::train(&more, Some(dir.path())).unwrap();
    let state = fs::read_to_string(more.out.join(commands::TRAIN_STATE)).unwrap();
    assert!(state.contains("epoch = 7\n") && state.contains("step = 14\n"), "{state}");
}

#[test]
fn eval_writes_one_reconstruction_per_image_deterministically() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(dir.path(), TaskKind::Deblur, Regime::UnsupNonBlind);
    commands::gen_data(&cfg).unwrap();
    commands::train(&cfg, None).unwrap();
    let ckpt = dir.path().join(commands::FINAL_CHECKPOINT);
    commands::eval(&cfg, &ckpt).unwrap();
    let out = dir.path().join("eval");
    let read_all = || -> Vec<Vec<u8>> { (0..3).map(|i| fs::read(out.join(format!("recon_{i:06}.pgm"))).unwrap()).collect() };
    let first = read_all();
    assert_eq!(files_in(&out), 3 + 1);
    commands::eval(&cfg, &ckpt).unwrap();
    assert_eq!(first, read_all());
    let csv = fs::read_to_string(out.join("psnr.csv")).unwrap();
    assert!(csv.starts_with("image,psnr\n") && csv.contains("\nmean,"));

    // Ground truth scored against itself hits the PSNR cap.
    let set = dataset::load_eval(&cfg.dataset_dir(), &cfg.task().unwrap()).unwrap();
    assert_eq!(psnr(set.images[0].data(), set.images[0].data()), 99.0);
}

#[test]
fn reconstruct_reads_and_writes_pgm() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny(dir.path(), TaskKind::Compressive, Regime::UnsupNonBlind);
    cfg.max_epochs = 1;
    commands::gen_data(&cfg).unwrap();
    commands::train(&cfg, None).unwrap();
    let input = dir.path().join("in.pgm");
    let mut bytes = b"P5\n16 16\n255\n".to_vec();
    bytes.extend((0..256).map(|i| (i % 251) as u8));
    fs::write(&input, bytes).unwrap();
    let output = dir.path().join("out.pgm");
    commands::reconstruct(&cfg, &dir.path().join(commands::FINAL_CHECKPOINT), &input, &output).unwrap();
    let img = swaptrain_cli::io::read_image(&output).unwrap();
    assert_eq!((img.width, img.height), (16, 16));
    // Wrong geometry is a usage error.
    fs::write(&input, b"P5\n4 4\n255\n0000000000000000").unwrap();
    assert!(commands::reconstruct(&cfg, &dir.path().join(commands::FINAL_CHECKPOINT), &input, &output).is_err());
}

#[test]
fn analyze_q_reports_rank_verdicts() {
    let dir = tempfile::tempdir().unwrap();
    let full = commands::analyze_q(&shipped("q_cs.cfg", &dir.path().join("a"))).unwrap();
    assert!(full.contains("full rank true"), "{full}");
    let fixed = commands::analyze_q(&shipped("q_fixed.cfg", &dir.path().join("b"))).unwrap();
    assert!(fixed.contains("full rank false"), "{fixed}");
    let mut blur = tiny(&dir.path().join("c"), TaskKind::Deblur, Regime::UnsupNonBlind);
    blur.kernel_samples = 200;
    let spectrum = commands::analyze_q(&blur).unwrap();
    assert!(spectrum.contains("all bins positive true"), "{spectrum}");
    assert!(dir.path().join("c/spectrum.csv").exists());
    assert_eq!(
        fs::read_to_string(dir.path().join("a/eigenvalues.csv")).unwrap().lines().count(),
        144 + 1
    );
}

#[test]
fn verify_theory_refuses_rank_deficient_configs() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = shipped("theory_rank_deficient.cfg", dir.path());
    cfg.theory_samples = 5_000;
    cfg.oracle_train = 2_000;
    match commands::verify_theory(&cfg) {
        Err(Error::RankDeficient { null_dim, .. }) => assert_eq!(null_dim, 4),
        other => panic!("expected a refusal, got {other:?}"),
    }
    let summary = fs::read_to_string(dir.path().join("summary.txt")).unwrap();
    assert!(summary.contains("null space") || summary.contains("null(Q)"), "{summary}");
}

fn run(args: &[&str], cwd: &Path) -> (i32, String) {
    let out = Command::new(env!("CARGO_BIN_EXE_swaptrain")).args(args).current_dir(cwd).output().unwrap();
    let text = String::from_utf8_lossy(&out.stdout).into_owned() + &String::from_utf8_lossy(&out.stderr);
    (out.status.code().unwrap(), text)
}

#[test]
fn binary_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let cfgs = configs_dir();
    let (code, _) = run(&["train", "--bogus"], dir.path());
    assert_eq!(code, 1);
    fs::write(dir.path().join("bad.cfg"), "[train]\nlearning_rate = 1\n").unwrap();
    let (code, text) = run(&["gen-data", "--config", "bad.cfg"], dir.path());
    assert_eq!(code, 1);
    assert!(text.contains("learning_rate"), "{text}");
    let (code, text) = run(
        &["analyze-q", "--config", cfgs.join("q_cs.cfg").to_str().unwrap(), "--out", "q"],
        dir.path(),
    );
    assert_eq!(code, 0, "{text}");
    assert!(dir.path().join("q/config.resolved.txt").exists());
    fs::write(
        dir.path().join("deficient.cfg"),
        "[experiment]\nout = th\n[theory]\nrank_deficient = true\nsamples = 2000\noracle_train = 1000\n",
    )
    .unwrap();
    let (code, text) = run(&["verify-theory", "--config", "deficient.cfg"], dir.path());
    assert_eq!(code, 2, "{text}");
    assert!(text.contains("null space of dimension 4"), "{text}");
}
