use std::fs;
use std::path::Path;
use std::process::{Command, Output};
use std::time::{Duration, Instant};

const TINY_CONFIG: &str = r#"
[mesh]
nx = 2
ny = 2
lx = 2.0
ly = 2.0
poisson = 0.0

[phantom]
background = 0.0
clamp_top_row = true

[[phantom.shapes]]
kind = "rectangle"
x0 = 0.0
x1 = 1.0
y0 = 0.0
y1 = 1.0
value = 1.6094379124341003

[bc]
kind = "platen"
top_uy = -0.02

[noise]
snr = 1e4
seed = 3

[solver]
max_bases = 2

[validation]
samples = 50
seed = 1
"#;

fn elastovb(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_elastovb"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn write_config(dir: &Path) -> String {
    let path = dir.join("tiny.toml");
    fs::write(&path, TINY_CONFIG).unwrap();
    path.display().to_string()
}

#[test]
fn tiny_pipeline_runs_end_to_end_quickly() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    let out = dir.path().join("run");
    let out = out.to_str().unwrap();

    let start = Instant::now();
    let g = elastovb(&["generate", "--config", &cfg, "--out", out]);
    assert_eq!(code(&g), 0, "{}", String::from_utf8_lossy(&g.stderr));
    let i = elastovb(&["invert", "--config", &cfg, "--out", out]);
    assert_eq!(code(&i), 0, "{}", String::from_utf8_lossy(&i.stderr));
    let v = elastovb(&["validate", "--config", &cfg, "--out", out]);
    assert_eq!(code(&v), 0, "{}", String::from_utf8_lossy(&v.stderr));
    assert!(start.elapsed() < Duration::from_secs(1), "took {:?}", start.elapsed());

    assert!(stdout(&i).contains("forward calls"));
    assert!(stdout(&v).contains("ESS"));
    for file in ["observations.json", "run_trace.json", "posterior_mean.csv", "is_report.json"] {
        assert!(Path::new(out).join(file).exists(), "{file} missing");
    }
}

#[test]
fn report_is_idempotent_and_lists_results() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    let out = dir.path().to_str().unwrap();
    for cmd in ["generate", "invert"] {
        assert_eq!(code(&elastovb(&[cmd, "--config", &cfg, "--out", out])), 0);
    }
    let first = elastovb(&["report", "--out", out]);
    let second = elastovb(&["report", "--out", out]);
    assert_eq!(code(&first), 0);
    assert_eq!(stdout(&first), stdout(&second));
    assert!(stdout(&first).contains("forward_calls:"));
    assert!(stdout(&first).contains("missing:"), "no IS report yet");
}

#[test]
fn report_on_an_empty_directory_succeeds() {
    let dir = tempfile::tempdir().unwrap();
    let r = elastovb(&["report", "--out", dir.path().to_str().unwrap()]);
    assert_eq!(code(&r), 0);
    assert_eq!(stdout(&r).matches("missing:").count(), 3);
}

#[test]
fn usage_errors_exit_with_one() {
    assert_eq!(code(&elastovb(&["frobnicate"])), 1);
    assert_eq!(code(&elastovb(&["invert", "--max-bases", "many"])), 1);
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("absent.toml");
    assert_eq!(code(&elastovb(&["generate", "--config", missing.to_str().unwrap()])), 1);
    assert_eq!(code(&elastovb(&["--help"])), 0);
}

#[test]
fn invalid_overrides_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    let out = dir.path().to_str().unwrap();
    let r = elastovb(&["generate", "--config", &cfg, "--out", out, "--snr", "-3"]);
    assert_eq!(code(&r), 1);
}

#[test]
fn numerical_failures_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    let out = dir.path().to_str().unwrap();
    assert_eq!(code(&elastovb(&["generate", "--config", &cfg, "--out", out])), 0);
    // Observations so large that the squared residual overflows.
    let path = dir.path().join("observations.json");
    let mut obs: serde_json::Value = serde_json::from_str(&fs::read_to_string(&path).unwrap()).unwrap();
    for v in obs["values"].as_array_mut().unwrap() {
        *v = serde_json::json!(1e200);
    }
    fs::write(&path, obs.to_string()).unwrap();
    let r = elastovb(&["invert", "--config", &cfg, "--out", out]);
    assert_eq!(code(&r), 2, "{}", String::from_utf8_lossy(&r.stderr));
}

#[test]
fn seed_override_changes_the_noise_realization() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    let read = |sub: &str, seed: &str| {
        let out = dir.path().join(sub);
        let out = out.to_str().unwrap();
        assert_eq!(code(&elastovb(&["generate", "--config", &cfg, "--out", out, "--seed", seed])), 0);
        fs::read_to_string(Path::new(out).join("observations.json")).unwrap()
    };
    let a = read("a", "1");
    assert_eq!(a, read("b", "1"));
    assert_ne!(a, read("c", "2"));
}
