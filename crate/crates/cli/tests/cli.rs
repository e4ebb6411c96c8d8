use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use synflow::mdp::read_routes_jsonl;
use synflow_cli::commands::{export_routes, COUNT_FILE, ESTIMATE_FILE, EVAL_FILE, GRADCHECK_FILE, ROUTES_FILE, ROUTE_REPORT_FILE};
use synflow_cli::config::parse_config;

fn synflow(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_synflow"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let o = synflow(args);
    assert!(
        o.status.success(),
        "{args:?}\nstdout: {}\nstderr: {}",
        String::from_utf8_lossy(&o.stdout),
        String::from_utf8_lossy(&o.stderr)
    );
    String::from_utf8(o.stdout).unwrap()
}

fn write_config(dir: &Path, text: &str) -> PathBuf {
    let p = dir.join("run.toml");
    fs::write(&p, text).unwrap();
    p
}

fn files_under(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&p).unwrap());
            }
        }
    }
    out
}

const SMALL_TRAIN: &str = r#"
seed = 3
[env]
preset = "tiny"
[reward]
kind = "rediscovery"
[train]
batch_size = 8
steps = 6
checkpoint_every = 3
backward_mode = "max_likelihood"
[sample]
n = 20
[eval]
n = 20
"#;

#[test]
fn enumerate_tiny_matches_golden_count() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "[env]\npreset = \"tiny\"\n");
    let out = dir.path().join("out");
    ok(&["enumerate", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    let golden = include_str!("golden/tiny_count.txt");
    assert_eq!(fs::read_to_string(out.join(COUNT_FILE)).unwrap(), golden);
    let listed = fs::read_to_string(out.join("terminals.txt")).unwrap();
    assert_eq!(listed.lines().count().to_string(), golden.trim());
}

#[test]
fn unknown_config_key_is_named() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "[env]\npreset = \"tiny\"\n[train]\nlr_pF = 0.1\n");
    let o = synflow(&["train", "--config", cfg.to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("lr_pF"));
}

#[test]
fn missing_config_file_fails() {
    let o = synflow(&["train", "--config", "/nonexistent/run.toml"]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("/nonexistent/run.toml"));
}

#[test]
fn minimal_config_defaults() {
    let c = parse_config("[env]\npreset = \"tiny\"\n").unwrap();
    assert_eq!((c.train.batch_size, c.train.lr_z, c.train.beta), (64, 1e-3, 1.0));
}

#[test]
fn train_and_sample_are_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL_TRAIN);
    let cfg = cfg.to_str().unwrap();
    let runs: Vec<PathBuf> = ["a", "b"].iter().map(|n| dir.path().join(n)).collect();
    for (k, run) in runs.iter().enumerate() {
        let out = run.to_str().unwrap();
        // thread count must not change results
        let threads = if k == 0 { "1" } else { "2" };
        ok(&["train", "--config", cfg, "--out", out, "--threads", threads]);
        ok(&["sample", "--config", cfg, "--out", out]);
        ok(&["eval", "--config", cfg, "--out", out]);
    }
    let (a, b) = (files_under(&runs[0]), files_under(&runs[1]));
    assert_eq!(a, b);
    for f in ["metrics.csv", "model.ckpt", "checkpoints/step_0000003.ckpt", ROUTES_FILE, EVAL_FILE] {
        assert!(a.contains_key(Path::new(f)), "{f} missing");
    }
    let c = dir.path().join("c");
    ok(&["train", "--config", cfg, "--out", c.to_str().unwrap(), "--seed", "4"]);
    assert_ne!(a[Path::new("metrics.csv")], fs::read(c.join("metrics.csv")).unwrap());
}

#[test]
fn sampled_routes_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL_TRAIN);
    let out = dir.path().join("run");
    let (cfg, out_s) = (cfg.to_str().unwrap(), out.to_str().unwrap());
    ok(&["train", "--config", cfg, "--out", out_s]);
    ok(&["sample", "--config", cfg, "--out", out_s]);
    let bytes = fs::read(out.join(ROUTES_FILE)).unwrap();
    let routes = read_routes_jsonl(bytes.as_slice()).unwrap();
    assert_eq!(routes.len(), 20);
    assert!(routes.iter().all(|r| r.reward.is_some() && !r.steps.is_empty()));
    let again = dir.path().join("again.jsonl");
    export_routes(&routes, &again).unwrap();
    assert_eq!(fs::read(&again).unwrap(), bytes);
}

#[test]
fn empty_route_export_is_an_empty_file() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("empty.jsonl");
    export_routes(&[], &p).unwrap();
    assert_eq!(fs::read(&p).unwrap(), b"");
}

#[test]
fn routes_report_on_trap_env() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        r#"
[env]
preset = "trap"
[train]
batch_size = 16
steps = 3
backward_mode = "reinforce"
[routes]
test_rollouts = 200
"#,
    );
    let out = dir.path().join("run");
    let (cfg, out_s) = (cfg.to_str().unwrap(), out.to_str().unwrap());
    ok(&["train", "--config", cfg, "--out", out_s]);
    ok(&["routes", "--config", cfg, "--out", out_s]);
    let report = fs::read_to_string(out.join(ROUTE_REPORT_FILE)).unwrap();
    let lines: Vec<&str> = report.lines().collect();
    assert_eq!(lines[0], "set,molecules,trained_solved,uniform_solved");
    assert!(lines[1].starts_with("train,") && lines[2].starts_with("test,"));
}

#[test]
fn estimate_space_reports_relative_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "[env]\npreset = \"pair\"\n[train]\nsteps = 200\nbatch_size = 16\nlr_pf = 1e-3\nlr_z = 0.1\n",
    );
    let out = dir.path().join("run");
    ok(&["estimate-space", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    let text = fs::read_to_string(out.join(ESTIMATE_FILE)).unwrap();
    let row: Vec<&str> = text.lines().nth(1).unwrap().split(',').collect();
    let (count, rel): (usize, f64) = (row[0].parse().unwrap(), row[3].parse().unwrap());
    assert_eq!(count, 3);
    assert!(rel <= 0.15, "{text}");
}

#[test]
fn gradcheck_command_passes() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "[env]\npreset = \"pair\"\nfp_nbits = 64\n[gradcheck]\nseeds = 2\n",
    );
    let out = dir.path().join("run");
    let stdout = ok(&["gradcheck", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert!(stdout.contains("max relative error"));
    assert_eq!(fs::read_to_string(out.join(GRADCHECK_FILE)).unwrap().lines().count(), 3);
}
