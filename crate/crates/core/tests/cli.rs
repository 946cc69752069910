use std::path::Path;
use std::process::{Command, Output};

fn sigmaflow(args: &[&str], out_env: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sigmaflow"))
        .args(args)
        .env("SIGMAFLOW_OUT", out_env)
        .output()
        .expect("binary runs")
}

fn write(dir: &Path, name: &str, text: &str) -> String {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p.to_string_lossy().into_owned()
}

fn only_subdir(dir: &Path) -> std::path::PathBuf {
    let mut entries: Vec<_> = std::fs::read_dir(dir).unwrap().map(|e| e.unwrap().path()).collect();
    assert_eq!(entries.len(), 1, "{entries:?}");
    entries.pop().unwrap()
}

const DYNAMICS: &str = r#"
experiment = "dynamics"
seed = 7
[grid]
d = 2
n = 16
K = 3
m = 2.0
lambda = 1.0
[ensemble]
N = 2
[time]
dt = 0.01
steps = 60
record_every = 10
"#;

/// Root of `π/(2c) coth(πc) = μ` with `c = √(1+μ)`, by plain bisection.
fn coth_root() -> f64 {
    let f = |mu: f64| {
        let c = (1.0 + mu).sqrt();
        let pc = std::f64::consts::PI * c;
        std::f64::consts::PI / (2.0 * c) * pc.cosh() / pc.sinh() - mu
    };
    let (mut lo, mut hi) = (0.0, 10.0);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if f(mid) > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

#[test]
fn mu_solver_reports_the_one_dimensional_root() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "mu.toml", "experiment = \"mu-solver\"\nseed = 1\n[grid]\nd = 1\nn = 18\nK = 8\nm = 1.0\n");
    let out = sigmaflow(&["mu-solver", "--config", &cfg], &dir.path().join("out"));
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let run = only_subdir(&dir.path().join("out"));
    let v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(run.join("verdict.json")).unwrap()).unwrap();
    assert_eq!(v["status"], "pass");
    let mu = v["verdict"]["mu_star"].as_f64().unwrap();
    assert!((mu - coth_root()).abs() < 1e-10, "{mu}");
    assert!((mu - 1.0874).abs() < 1e-4);
    let table = std::fs::read_to_string(run.join("mu_truncation.csv")).unwrap();
    assert!(table.starts_with("K,mu,gap_to_analytic\n"));
    assert!(table.lines().any(|l| l.starts_with("8,")));
}

#[test]
fn cubic_rule_violation_exits_with_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "d.toml", DYNAMICS);
    let out = sigmaflow(&["dynamics", "--config", &cfg, "--n=10"], dir.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("4K+2"));
}

#[test]
fn unknown_keys_exit_with_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "d.toml", DYNAMICS);
    assert_eq!(sigmaflow(&["dynamics", "--config", &cfg, "--colour=3"], dir.path()).status.code(), Some(2));
    let bad = write(dir.path(), "bad.toml", &format!("{DYNAMICS}extra = 1\n"));
    assert_eq!(sigmaflow(&["dynamics", "--config", &bad], dir.path()).status.code(), Some(2));
    assert_eq!(sigmaflow(&["nonsense", "--config", &cfg], dir.path()).status.code(), Some(2));
}

#[test]
fn overrides_are_echoed_and_env_sets_output_root() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "d.toml", DYNAMICS);
    let out_root = dir.path().join("env-out");
    let out = sigmaflow(&["dynamics", "--config", &cfg, "--m=5", "--time.steps=20"], &out_root);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let run = only_subdir(&out_root);
    let echo: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(run.join("config.json")).unwrap()).unwrap();
    assert_eq!(echo["grid"]["m"], 5.0);
    assert_eq!(echo["time"]["steps"], 20);
    for f in ["records.csv", "verdict.json", "metadata.json", "final.bin"] {
        assert!(run.join(f).exists(), "{f} missing");
    }
}

#[test]
fn identical_configs_give_identical_records() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "d.toml", DYNAMICS);
    let read = |root: &str| {
        let out = sigmaflow(&["dynamics", "--config", &cfg], &dir.path().join(root));
        assert!(out.status.success());
        let run = only_subdir(&dir.path().join(root));
        (std::fs::read(run.join("records.csv")).unwrap(), std::fs::read(run.join("verdict.json")).unwrap())
    };
    let a = read("a");
    assert!(!a.0.is_empty());
    assert_eq!(a, read("b"));
}

#[test]
fn corrupt_checkpoint_aborts_cleanly() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "d.toml", DYNAMICS);
    let junk = write(dir.path(), "junk.bin", "XXXXnot a checkpoint");
    let out = sigmaflow(&["dynamics", "--config", &cfg, &format!("--resume={junk}")], &dir.path().join("out"));
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("magic"));
    let run = only_subdir(&dir.path().join("out"));
    let v = std::fs::read_to_string(run.join("verdict.json")).unwrap();
    assert!(v.contains("abort"));
}
