use std::path::Path;
use std::process::Command;

use stgnn::cli::{RunManifest, EXIT_CONFIG, EXIT_IO, EXIT_OK};

fn stgnn(args: &[&str]) -> i32 {
    let status = Command::new(env!("CARGO_BIN_EXE_stgnn"))
        .args(args)
        .output()
        .expect("binary runs");
    status.status.code().expect("exit code")
}

fn ok(args: &[&str]) {
    let out = Command::new(env!("CARGO_BIN_EXE_stgnn"))
        .args(args)
        .output()
        .unwrap();
    assert!(
        out.status.success(),
        "stgnn {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
}

fn read(p: impl AsRef<Path>) -> String {
    std::fs::read_to_string(p.as_ref()).unwrap_or_else(|e| panic!("{}: {e}", p.as_ref().display()))
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Small generate → train → rollout → sweep pipeline into `root`.
fn pipeline(root: &Path) {
    let gen = root.join("gen");
    let data = gen.join("dataset");
    let tr = root.join("train");
    let model = tr.join("model");
    ok(&[
        "--seed",
        "11",
        "--out",
        s(&gen),
        "generate",
        "--agents",
        "8",
        "--horizon",
        "40",
        "--train",
        "3",
        "--validation",
        "2",
        "--test",
        "2",
    ]);
    ok(&[
        "--seed",
        "11",
        "--out",
        s(&tr),
        "train",
        "--data",
        s(&data),
        "--epochs",
        "2",
    ]);
    ok(&[
        "--seed",
        "11",
        "--out",
        s(&root.join("roll")),
        "rollout",
        "--data",
        s(&data),
        "--model",
        s(&model),
        "--mode",
        "perturbed",
        "--probability",
        "0.8",
    ]);
    ok(&[
        "--seed",
        "11",
        "--jobs",
        "2",
        "--out",
        s(&root.join("sweep")),
        "sweep",
        "--model",
        s(&model),
        "--data",
        s(&data),
        "--sizes",
        "8",
        "--trials",
        "2",
        "--probabilities",
        "1,0.9,0.8",
    ]);
    ok(&[
        "--seed",
        "11",
        "--out",
        s(&root.join("fsweep")),
        "sweep",
        "--sizes",
        "12",
        "--trials",
        "3",
    ]);
    ok(&[
        "--out",
        s(&root.join("spectra")),
        "spectra",
        "--model",
        s(&model),
        "--lambda-min",
        "0",
        "--lambda-max",
        "4",
    ]);
}

const CSVS: &[&str] = &[
    "gen/episodes.csv",
    "train/loss.csv",
    "roll/rollout.csv",
    "roll/rollout_summary.csv",
    "sweep/sweep_trials.csv",
    "sweep/sweep_summary.csv",
    "fsweep/sweep_trials.csv",
    "fsweep/sweep_summary.csv",
    "spectra/spectra_summary.csv",
    "spectra/spectra_grid.csv",
];

#[test]
fn reruns_are_byte_identical() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    pipeline(a.path());
    pipeline(b.path());
    for csv in CSVS {
        let x = read(a.path().join(csv));
        assert!(x.lines().count() > 1, "{csv} has no rows");
        assert_eq!(x, read(b.path().join(csv)), "{csv} differs between runs");
    }
    for svg in ["sweep/sweep_N8.svg", "fsweep/sweep_N12.svg"] {
        assert_eq!(read(a.path().join(svg)), read(b.path().join(svg)));
    }
    let manifest = RunManifest::load(a.path().join("train/manifest.toml")).unwrap();
    assert_eq!(manifest.config.train.epochs, 2);
    assert_eq!(manifest.config.train.seed, 11);
    assert_eq!(manifest.seed, Some(11));
    assert!(manifest.artifacts.iter().any(|x| x == "loss.csv"));
}

#[test]
fn unknown_config_key_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.toml");
    std::fs::write(&cfg, "[sweep]\ntrails = 3\n").unwrap();
    let code = stgnn(&[
        "--config",
        s(&cfg),
        "--out",
        s(&dir.path().join("o")),
        "sweep",
    ]);
    assert_eq!(code, EXIT_CONFIG);
    assert!(!dir.path().join("o/manifest.toml").exists());
    assert_eq!(stgnn(&["frobnicate"]), EXIT_CONFIG);
}

#[test]
fn missing_checkpoint_is_an_io_error() {
    let dir = tempfile::tempdir().unwrap();
    let code = stgnn(&[
        "--out",
        s(&dir.path().join("o")),
        "sweep",
        "--model",
        s(&dir.path().join("absent")),
    ]);
    assert_eq!(code, EXIT_IO);
    assert_eq!(
        stgnn(&[
            "--out",
            s(&dir.path().join("o")),
            "train",
            "--data",
            s(&dir.path().join("absent"))
        ]),
        EXIT_IO
    );
}

#[test]
fn config_file_values_are_overridden_by_flags() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.toml");
    std::fs::write(
        &cfg,
        "[flock]\nagent_count = 6\nhorizon = 30\n[counts]\ntrain = 1\nvalidation = 0\ntest = 0\n",
    )
    .unwrap();
    let out = dir.path().join("o");
    ok(&[
        "--config",
        s(&cfg),
        "--out",
        s(&out),
        "generate",
        "--horizon",
        "20",
    ]);
    let m = RunManifest::load(out.join("manifest.toml")).unwrap();
    assert_eq!(m.config.flock.agent_count, 6);
    assert_eq!(m.config.flock.horizon, 20);
    let episodes = read(out.join("episodes.csv"));
    assert_eq!(episodes.lines().count(), 2);
    assert!(episodes.lines().nth(1).unwrap().starts_with("train,0,"));
    assert!(out.join("dataset/train/00000/positions.bin").is_file());
    assert!(!out.join("dataset/test").exists());
}

#[test]
fn resumed_training_matches_uninterrupted() {
    let dir = tempfile::tempdir().unwrap();
    let gen = dir.path().join("gen");
    let data = gen.join("dataset");
    ok(&[
        "--seed",
        "5",
        "--out",
        s(&gen),
        "generate",
        "--agents",
        "6",
        "--horizon",
        "30",
        "--train",
        "2",
        "--validation",
        "1",
        "--test",
        "1",
    ]);
    let full = dir.path().join("full");
    let split = dir.path().join("split");
    ok(&[
        "--seed",
        "5",
        "--out",
        s(&full),
        "train",
        "--data",
        s(&data),
        "--epochs",
        "3",
    ]);
    ok(&[
        "--seed",
        "5",
        "--out",
        s(&split),
        "train",
        "--data",
        s(&data),
        "--epochs",
        "1",
    ]);
    ok(&[
        "--seed",
        "5",
        "--out",
        s(&split),
        "train",
        "--data",
        s(&data),
        "--epochs",
        "3",
        "--resume",
    ]);
    assert_eq!(read(full.join("loss.csv")), read(split.join("loss.csv")));
    let mut files: Vec<_> = std::fs::read_dir(full.join("model"))
        .unwrap()
        .map(|e| e.unwrap().file_name())
        .collect();
    files.sort();
    assert!(files.len() >= 4);
    for f in files {
        assert_eq!(
            std::fs::read(full.join("model").join(&f)).unwrap(),
            std::fs::read(split.join("model").join(&f)).unwrap(),
            "{f:?} differs"
        );
    }
    let zero = dir.path().join("zero");
    ok(&[
        "--seed",
        "5",
        "--out",
        s(&zero),
        "train",
        "--data",
        s(&data),
        "--epochs",
        "0",
    ]);
    assert!(zero.join("model/model.toml").is_file());
    assert_eq!(read(zero.join("loss.csv")).lines().count(), 1);
}

#[test]
fn spectra_examples() {
    let dir = tempfile::tempdir().unwrap();
    let c_l = |taps: &str, name: &str| -> f64 {
        let path = dir.path().join(format!("{name}.txt"));
        std::fs::write(&path, taps).unwrap();
        let out = dir.path().join(name);
        ok(&["--out", s(&out), "spectra", "--taps", s(&path)]);
        let summary = read(out.join("spectra_summary.csv"));
        let row = summary.lines().nth(1).unwrap();
        row.split(',').nth(3).unwrap().parse().unwrap()
    };
    assert_eq!(c_l("0\n0.7\n", "constant"), 0.0);
    assert!((c_l("1\n0\n1\n", "shift") - 1.0).abs() < 1e-12);
    let path = dir.path().join("empty.txt");
    std::fs::write(&path, "1\n0\n1\n").unwrap();
    let code = stgnn(&[
        "--out",
        s(&dir.path().join("e")),
        "spectra",
        "--taps",
        s(&path),
        "--lambda-min",
        "2",
        "--lambda-max",
        "1",
    ]);
    assert_eq!(code, EXIT_CONFIG);
}

#[test]
fn sweep_at_full_probability_measures_nothing() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("o");
    assert_eq!(
        stgnn(&[
            "--out",
            s(&out),
            "sweep",
            "--sizes",
            "10",
            "--probabilities",
            "1",
            "--trials",
            "4"
        ]),
        EXIT_OK
    );
    let trials = read(out.join("sweep_trials.csv"));
    assert_eq!(trials.lines().count(), 5);
    for row in trials.lines().skip(1) {
        let measured: f64 = row.split(',').nth(3).unwrap().parse().unwrap();
        assert_eq!(measured, 0.0);
    }
    let m = RunManifest::load(out.join("manifest.toml")).unwrap();
    assert_eq!(m.config.sweep.probabilities, vec![1.0]);
}
