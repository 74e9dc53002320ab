use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use qrd_cli::config::RunConfig;
use qrd_cli::error::CliError;
use tempfile::TempDir;

fn qrd(cwd: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_qrd")).current_dir(cwd).args(args).env_remove("QRD_THREADS").output().expect("qrd runs")
}

fn ok(cwd: &Path, args: &[&str]) -> String {
    let out = qrd(cwd, args);
    assert!(out.status.success(), "qrd {args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

const SMALL: &str = "seed = 3\n[device]\npreset = \"paper5q\"\nqubits = 2\nn_samples = 64\nshots_per_state = 60\n\
[arch]\nkind = \"dense\"\nlayer_dims = [64, 16, 2]\n[train]\nepochs = 4\nbatch_size = 64\n";

/// Writes the small config (decay-free when `noise` is given) and train/test datasets into a fresh directory.
fn small_setup(noise: Option<&str>) -> TempDir {
    let dir = TempDir::new().unwrap();
    let d = dir.path();
    let config = if noise.is_some() { SMALL.replace("paper5q", "independent") } else { SMALL.to_string() };
    std::fs::write(d.join("run.toml"), config).unwrap();
    for (seed, name) in [("1", "train.qrd"), ("2", "test.qrd")] {
        let mut args = vec!["gen", "--config", "run.toml", "--seed", seed, "--out", name];
        if let Some(n) = noise {
            args.extend(["--noise", n]);
        }
        ok(d, &args);
    }
    dir
}

fn read(p: impl AsRef<Path>) -> String {
    std::fs::read_to_string(p).unwrap()
}

#[test]
fn exit_codes_map_error_kinds() {
    assert_eq!(CliError::Config(String::new()).exit_code(), 2);
    assert_eq!(CliError::Runtime(String::new()).exit_code(), 3);
    assert_eq!(CliError::Equivalence(String::new()).exit_code(), 4);
}

#[test]
fn config_errors_report_line_and_exit_2() {
    let dir = TempDir::new().unwrap();
    let d = dir.path();
    std::fs::write(d.join("bad.toml"), "seed = 1\n[train]\nepochs = \"many\"\n").unwrap();
    let out = qrd(d, &["gen", "--config", "bad.toml", "--out", "x.qrd"]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("line 3"));

    std::fs::write(d.join("typo.toml"), "[trian]\nepochs = 1\n").unwrap();
    let out = qrd(d, &["gen", "--config", "typo.toml", "--out", "x.qrd"]);
    assert_eq!(code(&out), 2);
    let err = String::from_utf8_lossy(&out.stderr).into_owned();
    assert!(err.contains("line 1") && err.contains("trian"), "{err}");

    let msg = RunConfig::parse("[arch]\npreset = 5\n", "inline.toml").unwrap_err().to_string();
    assert!(msg.contains("line 2"), "{msg}");
}

#[test]
fn threads_env_is_validated() {
    let dir = TempDir::new().unwrap();
    let run = |v: &str| {
        Command::new(env!("CARGO_BIN_EXE_qrd"))
            .current_dir(dir.path())
            .args(["hwsim", "--arch", "arch5", "--out-dir", "hw"])
            .env("QRD_THREADS", v)
            .output()
            .unwrap()
    };
    assert_eq!(code(&run("0")), 2);
    assert_eq!(code(&run("lots")), 2);
    assert_eq!(code(&run("1")), 0);
}

#[test]
fn gen_one_qubit_one_shot_per_state() {
    let dir = TempDir::new().unwrap();
    let d = dir.path();
    let out = ok(d, &["gen", "--qubits", "1", "--shots-per-state", "1", "--out", "one.qrd"]);
    assert!(out.contains("2 shots"), "{out}");
    let ds = qrd_core::synth::load_dataset(&d.join("one.qrd")).unwrap();
    assert_eq!(ds.shots.len(), 2);
    let mut labels: Vec<u32> = ds.shots.iter().map(|s| s.label).collect();
    labels.sort();
    assert_eq!(labels, [0, 1]);
    assert!(d.join("one.qrd.manifest.json").exists());
}

#[test]
fn eval_rejects_same_seed_unless_allowed() {
    let dir = small_setup(None);
    let d = dir.path();
    let out = qrd(d, &["eval", "--data", "train.qrd", "--discriminator", "mf", "--train", "train.qrd", "--out-dir", "e"]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("seed"));
    ok(d, &["eval", "--data", "train.qrd", "--discriminator", "mf", "--train", "train.qrd", "--allow-same-seed", "--out-dir", "e"]);

    // The training seed is recovered from the model's manifest.
    ok(d, &["train", "--config", "run.toml", "--data", "train.qrd", "--discriminator", "mf", "--out-dir", "m"]);
    let out = qrd(d, &["eval", "--data", "train.qrd", "--discriminator", "mf", "--model", "m/model.qmf", "--out-dir", "e2"]);
    assert_eq!(code(&out), 2);
}

#[test]
fn noiseless_eval_is_perfect() {
    let dir = small_setup(Some("0"));
    let d = dir.path();
    for disc in ["bf", "mf", "svm"] {
        ok(d, &["eval", "--config", "run.toml", "--data", "test.qrd", "--discriminator", disc, "--train", "train.qrd", "--out-dir", disc]);
        let s: serde_json::Value = serde_json::from_str(&read(d.join(disc).join("metrics.json"))).unwrap();
        assert_eq!(s["report"]["f_gm"].as_f64().unwrap(), 1.0, "{disc}");
        assert_eq!(s["mean_abs_off_diagonal"].as_f64().unwrap(), 0.0, "{disc}");
    }
}

#[test]
fn arch_mismatch_fails_before_training() {
    let dir = small_setup(None);
    let d = dir.path();
    let out = qrd(d, &["train", "--config", "run.toml", "--data", "train.qrd", "--arch", "arch5", "--out-dir", "t"]);
    assert_eq!(code(&out), 2);
    assert!(!d.join("t").join("model.qnm").exists());
    let out = qrd(d, &["train", "--config", "run.toml", "--data", "train.qrd", "--window", "4", "--out-dir", "t"]);
    assert_eq!(code(&out), 2);
}

#[test]
fn train_eval_hwsim_pipeline() {
    let dir = small_setup(None);
    let d = dir.path();
    ok(d, &["train", "--config", "run.toml", "--data", "train.qrd", "--out-dir", "q"]);
    for f in ["model.qnm", "history.csv", "manifest.json"] {
        assert!(d.join("q").join(f).exists(), "{f}");
    }
    let history = read(d.join("q/history.csv"));
    assert_eq!(history.lines().count(), 5, "{history}");

    ok(d, &["eval", "--data", "test.qrd", "--discriminator", "qnn", "--model", "q/model.qnm", "--out-dir", "eq"]);
    let csv = read(d.join("eq/metrics.csv"));
    assert!(csv.lines().count() >= 3);

    let out = qrd(d, &["hwsim", "--model", "q/model.qnm", "--data", "test.qrd", "--out-dir", "hw"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let eq: serde_json::Value = serde_json::from_str(&read(d.join("hw/equivalence.json"))).unwrap();
    assert_eq!(eq["mismatches"].as_u64(), Some(0));
    assert_eq!(eq["n_checked"].as_u64(), Some(240));
    for f in ["latency.csv", "latency.json", "macs.json", "folding.json", "network.qtn", "manifest.json"] {
        assert!(d.join("hw").join(f).exists(), "{f}");
    }

    // Model/dataset qubit mismatch is a runtime error.
    ok(d, &["gen", "--qubits", "3", "--samples", "64", "--shots-per-state", "2", "--seed", "9", "--out", "three.qrd"]);
    let out = qrd(d, &["eval", "--data", "three.qrd", "--discriminator", "qnn", "--model", "q/model.qnm", "--out-dir", "bad"]);
    assert_eq!(code(&out), 3);

    ok(d, &["report", "--inputs", "eq", "hw", "--out-dir", "rep"]);
    let md = read(d.join("rep/report.md"));
    assert!(md.contains("| qnn |") && md.contains("## Latency"), "{md}");
}

#[test]
fn hwsim_latency_only_presets() {
    let dir = TempDir::new().unwrap();
    let d = dir.path();
    ok(d, &["hwsim", "--arch", "arch5", "--pe-cap", "0=16", "--out-dir", "a5"]);
    ok(d, &["hwsim", "--arch", "arch7", "--out-dir", "a7"]);
    let cycles = |p: &str| -> u64 {
        let v: serde_json::Value = serde_json::from_str(&read(d.join(p).join("latency.json"))).unwrap();
        v["total_cycles"].as_u64().unwrap()
    };
    assert!(cycles("a7") < cycles("a5"));
    assert_eq!(code(&qrd(d, &["hwsim", "--arch", "arch99", "--out-dir", "x"])), 2);
    assert_eq!(code(&qrd(d, &["hwsim", "--arch", "arch5", "--pe-cap", "zero", "--out-dir", "x"])), 2);
}

#[test]
fn sweep_rows_follow_value_then_seed_order() {
    let dir = small_setup(None);
    let d = dir.path();
    let out = qrd(
        d,
        &[
            "sweep",
            "--config",
            "run.toml",
            "--train",
            "train.qrd",
            "--test",
            "test.qrd",
            "--axis",
            "hidden_dims",
            "--values",
            "8,16x4,oops",
            "--reps",
            "2",
            "--epochs",
            "2",
            "--out-dir",
            "sw",
        ],
    );
    // A bad cell is recorded, not fatal.
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let csv = read(d.join("sw/sweep.csv"));
    let rows: Vec<Vec<&str>> = csv.lines().skip(1).map(|l| l.split(',').collect()).collect();
    let keys: Vec<(&str, &str)> = rows.iter().map(|r| (r[1], r[2])).collect();
    assert_eq!(keys, [("8", "3"), ("8", "4"), ("16x4", "3"), ("16x4", "4"), ("oops", "3"), ("oops", "4")]);
    for r in &rows[..4] {
        assert!(r.last().unwrap().is_empty());
        let f: f64 = r[4].parse().unwrap();
        assert!((0.0..=1.0).contains(&f));
    }
    assert!(!rows[4].last().unwrap().is_empty());
    let header = csv.lines().next().unwrap();
    assert_eq!(header, "axis,value,seed,n_params,f_gm,f_q0,f_q1,error");
    let summary = read(d.join("sw/sweep_summary.csv"));
    assert_eq!(summary.lines().count(), 4);
    assert!(summary.lines().last().unwrap().starts_with("hidden_dims,oops,0"));

    let out = qrd(
        d,
        &[
            "sweep",
            "--config",
            "run.toml",
            "--train",
            "train.qrd",
            "--test",
            "test.qrd",
            "--axis",
            "depth",
            "--values",
            "1",
            "--out-dir",
            "sw2",
        ],
    );
    assert_eq!(code(&out), 2);
}

#[test]
fn manifests_list_digests_and_no_unset_keys() {
    let dir = small_setup(None);
    let d = dir.path();
    ok(d, &["eval", "--config", "run.toml", "--data", "test.qrd", "--discriminator", "mf", "--train", "train.qrd", "--out-dir", "e"]);
    let m = qrd_cli::manifest::Manifest::read(&PathBuf::from(d).join("e/manifest.json")).unwrap();
    assert_eq!(m.command, "eval");
    assert_eq!(m.inputs.len(), 2);
    assert_eq!(m.outputs.len(), 3);
    for f in &m.outputs {
        assert_eq!(qrd_cli::manifest::sha256_file(&d.join(&f.path)).unwrap(), f.sha256);
        assert!(!Path::new(&f.path).is_absolute());
    }
    let text = read(d.join("e/manifest.json"));
    assert!(!text.contains("null"), "{text}");
}
