//! End-to-end runs of the `vptrap` binary.

use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = "dim=2\neps=0.01\nn_particles=1000\nt_max=1\ngrid_cells=32\nseed=7\n";

fn vptrap(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_vptrap")).args(args).output().expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn tiny_config(dir: &Path) -> String {
    let path = dir.join("tiny.cfg");
    std::fs::write(&path, TINY).unwrap();
    path.to_str().unwrap().to_string()
}

#[test]
fn simulate_writes_history_and_diagnostics() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let out = dir.path().join("run");
    let o = vptrap(&["simulate", "--config", &cfg, "--out", out.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(out.join("history.vptrap").exists());
    let csv = std::fs::read_to_string(out.join("diagnostics.csv")).unwrap();
    assert!(csv.starts_with("t,sup_force,weighted_sup_rho,mass,E_U1"));
}

#[test]
fn single_worker_output_is_byte_identical_and_overrides_match_the_file() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    let c = dir.path().join("c");
    let base = dir.path().join("base.cfg");
    std::fs::write(&base, TINY.replace("seed=7\n", "seed=1\n")).unwrap();
    for (config, out, extra) in [(&cfg, &a, None), (&cfg, &b, None), (&base.to_str().unwrap().to_string(), &c, Some("seed=7"))] {
        let mut args = vec!["simulate", "--workers", "1", "--config", config, "--out", out.to_str().unwrap()];
        if let Some(kv) = extra {
            args.extend(["--override", kv]);
        }
        assert_eq!(code(&vptrap(&args)), 0);
    }
    for f in ["diagnostics.csv", "history.vptrap"] {
        let first = std::fs::read(a.join(f)).unwrap();
        assert_eq!(first, std::fs::read(b.join(f)).unwrap(), "{f} differs between runs");
        assert_eq!(first, std::fs::read(c.join(f)).unwrap(), "{f} differs with --override");
    }
}

#[test]
fn trapped_set_needs_a_history_file() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let o = vptrap(&["trapped-set", "--config", &cfg, "--out", dir.path().join("empty").to_str().unwrap()]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("history"));
}

#[test]
fn trapped_set_reads_the_recorded_history() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let out = dir.path().join("run");
    let out = out.to_str().unwrap();
    assert_eq!(code(&vptrap(&["simulate", "--config", &cfg, "--out", out])), 0);
    let o = vptrap(&["trapped-set", "--config", &cfg, "--out", out]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stdout));
    let csv = std::fs::read_to_string(Path::new(out).join("manifold.csv")).unwrap();
    assert!(csv.starts_with("x1,x2,v1,v2,phi1,phi2,defect,iters"));
    assert_eq!(csv.lines().count(), 1 + 81);
}

#[test]
fn existing_outputs_need_force() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let out = dir.path().to_str().unwrap();
    assert_eq!(code(&vptrap(&["kernel-check", "--config", &cfg, "--out", out])), 0);
    assert_eq!(code(&vptrap(&["kernel-check", "--config", &cfg, "--out", out])), 2);
    assert_eq!(code(&vptrap(&["kernel-check", "--config", &cfg, "--out", out, "--force"])), 0);
}

#[test]
fn usage_and_config_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    assert_eq!(code(&vptrap(&["simulate", "--out", out, "--override", "eps=0.5"])), 2);
    assert_eq!(code(&vptrap(&["simulate", "--out", out, "--override", "nonsense"])), 2);
    assert_eq!(code(&vptrap(&["simulate", "--out", out, "--override", "colour=blue"])), 2);
    assert_eq!(code(&vptrap(&["simulate", "--out", out, "--config", "/no/such/file"])), 2);
    assert_eq!(code(&vptrap(&["modified-coeffs", "--out", out, "--override", "dim=3"])), 2);
    assert_eq!(code(&vptrap(&["teleport"])), 2);
}

#[test]
fn algebra_check_passes_and_writes_its_report() {
    let dir = tempfile::tempdir().unwrap();
    let o = vptrap(&["verify-algebra", "--out", dir.path().to_str().unwrap()]);
    assert_eq!(code(&o), 0);
    let report = std::fs::read_to_string(dir.path().join("algebra_report.txt")).unwrap();
    assert!(report.lines().all(|l| l.starts_with("ok")));
}

#[test]
fn diagnostics_agree_across_worker_counts() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let read = |workers: &str| {
        let out = dir.path().join(format!("w{workers}"));
        let o = vptrap(&["simulate", "--workers", workers, "--config", &cfg, "--out", out.to_str().unwrap()]);
        assert_eq!(code(&o), 0);
        let csv = std::fs::read_to_string(out.join("diagnostics.csv")).unwrap();
        csv.lines().skip(1).flat_map(|l| l.split(',').map(|v| v.parse::<f64>().unwrap()).collect::<Vec<_>>()).collect::<Vec<_>>()
    };
    let (one, four) = (read("1"), read("4"));
    assert_eq!(one.len(), four.len());
    for (a, b) in one.iter().zip(&four) {
        assert!((a - b).abs() <= 1e-12 * a.abs().max(b.abs()).max(1e-300), "{a} vs {b}");
    }
}
