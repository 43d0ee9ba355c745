//! Exit codes and determinism of the `ktl` binary.

use std::path::Path;
use std::process::{Command, Output};

fn ktl(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ktl"))
        .args(args)
        .env_remove("KTL_OUT")
        .env_remove("KTL_THREADS")
        .output()
        .expect("ktl runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited")
}

const TINY: &str = "\
[dataset]
n_train = 2
len_train = 64
n_val = 1
len_val = 64
n_test = 1
len_test = 64
";

fn tiny_config(dir: &Path) -> String {
    let p = dir.join("tiny.toml");
    std::fs::write(&p, TINY).unwrap();
    p.to_str().unwrap().to_owned()
}

#[test]
fn help_succeeds() {
    let o = ktl(&["--help"]);
    assert_eq!(code(&o), 0);
    let text = String::from_utf8_lossy(&o.stdout);
    for sub in ["simulate", "train-ae", "pretrain", "compute-safety", "finetune", "evaluate", "report"] {
        assert!(text.contains(sub), "{sub}");
    }
}

#[test]
fn bad_flags_are_config_errors() {
    assert_eq!(code(&ktl(&["simulate", "--preset", "huge"])), 2);
    assert_eq!(code(&ktl(&["simulate", "--variant", "koopman"])), 2);
    assert_eq!(code(&ktl(&["simulate", "--seed", "-1"])), 2);
    assert_eq!(code(&ktl(&["frobnicate"])), 2);
}

#[test]
fn bad_config_files_are_config_errors() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("absent.toml");
    assert_eq!(code(&ktl(&["simulate", "--config", missing.to_str().unwrap()])), 2);
    let typo = dir.path().join("typo.toml");
    std::fs::write(&typo, "[stage1]\nepochz = 3\n").unwrap();
    let out = dir.path().join("run");
    let o = ktl(&["simulate", "--config", typo.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("epochz"));
    assert_eq!(code(&ktl(&["simulate", "--threads", "0", "--out", out.to_str().unwrap()])), 2);
}

#[test]
fn later_stages_need_earlier_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    for stage in ["train-ae", "pretrain", "finetune", "evaluate", "report"] {
        assert_eq!(code(&ktl(&[stage, "--out", out])), 3, "{stage}");
    }
}

#[test]
fn simulate_is_deterministic_per_seed() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let run = |name: &str, seed: &str| {
        let out = dir.path().join(name);
        let o = ktl(&["simulate", "--config", &cfg, "--seed", seed, "--out", out.to_str().unwrap()]);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
        std::fs::read(out.join("data/train.csv")).unwrap()
    };
    let a = run("a", "5");
    let b = run("b", "5");
    let c = run("c", "6");
    assert_eq!(a, b);
    assert_ne!(a, c);
}

#[test]
fn environment_sets_the_run_directory() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let out = dir.path().join("from-env");
    let o = Command::new(env!("CARGO_BIN_EXE_ktl"))
        .args(["simulate", "--config", &cfg])
        .env("KTL_OUT", &out)
        .output()
        .unwrap();
    assert_eq!(code(&o), 0);
    assert!(out.join("data/train.csv").exists());
    assert!(out.join("manifest/simulate.toml").exists());
}
