use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn riskflow(args: &[&str], threads: Option<&str>) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_riskflow"));
    cmd.args(args).arg("--quiet");
    match threads {
        Some(n) => cmd.env("RISKFLOW_THREADS", n),
        None => cmd.env_remove("RISKFLOW_THREADS"),
    };
    cmd.output().expect("binary runs")
}

fn result(dir: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(dir.join("result.json")).unwrap()).unwrap()
}

fn small_run(dir: &Path, threads: Option<&str>) -> Output {
    riskflow(
        &["--paths", "1000", "--steps", "20", "--seed", "7", "--out", dir.to_str().unwrap()],
        threads,
    )
}

#[test]
fn cashflow_run_writes_result_and_tables() {
    let dir = tempfile::tempdir().unwrap();
    let out = riskflow(
        &["--paths", "100", "--steps", "20", "--dump-paths", "--out", dir.path().to_str().unwrap()],
        None,
    );
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let json = result(dir.path());
    assert_eq!(json["config"]["mc"]["n_paths"], 100);
    assert_eq!(json["config"]["grid"]["steps"], 20);
    for key in ["J_theta", "var_psi", "necessary_condition", "sufficient_probe", "determinism_hash", "fixed_point"] {
        assert!(json.get(key).is_some(), "missing {key}");
    }
    for file in ["cost_table.csv", "plot.csv", "paths.csv"] {
        assert!(dir.path().join(file).exists(), "missing {file}");
    }
    let plot = std::fs::read_to_string(dir.path().join("plot.csv")).unwrap();
    assert_eq!(plot.lines().count(), 22);
}

#[test]
fn identical_hash_across_runs_and_pools() {
    let dirs: Vec<_> = (0..3).map(|_| tempfile::tempdir().unwrap()).collect();
    let hashes: Vec<Value> = [Some("1"), Some("1"), Some("3")]
        .iter()
        .zip(&dirs)
        .map(|(threads, dir)| {
            let out = small_run(dir.path(), *threads);
            assert_eq!(out.status.code(), Some(0));
            result(dir.path())["determinism_hash"].clone()
        })
        .collect();
    assert!(hashes[0].is_string());
    assert_eq!(hashes[0], hashes[1]);
    assert_eq!(hashes[0], hashes[2]);
}

#[test]
fn failed_verdict_exits_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("c.toml");
    std::fs::write(&config, "experiment = \"generic_fbsde\"\n[mc]\nmax_iter = 1\ntol = 1e-14\n").unwrap();
    let out = riskflow(
        &["--config", config.to_str().unwrap(), "--paths", "500", "--steps", "10", "--out", dir.path().to_str().unwrap()],
        None,
    );
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(result(dir.path())["passed"], false);
}

#[test]
fn configuration_errors_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().to_str().unwrap();
    let typo = dir.path().join("typo.toml");
    std::fs::write(&typo, "[cashflow]\nsigm = 0.3\n").unwrap();
    let out = riskflow(&["--config", typo.to_str().unwrap(), "--out", out_dir], None);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("sigm"));

    let negative = dir.path().join("negative.toml");
    std::fs::write(&negative, "[cashflow]\nsigma = -1.0\n").unwrap();
    let out = riskflow(&["--config", negative.to_str().unwrap(), "--out", out_dir], None);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("sigma"));

    let out = riskflow(&["--out", out_dir], Some("many"));
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("RISKFLOW_THREADS"));
    assert!(!dir.path().join("result.json").exists());
}
