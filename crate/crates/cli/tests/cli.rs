use std::path::Path;
use std::process::{Command, Output};

fn cdpb(args: &[&str], env: &[(&str, &str)]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_cdpb"));
    cmd.args(args);
    for (k, v) in env {
        cmd.env(k, v);
    }
    cmd.output().expect("binary runs")
}

fn read_csv(path: &Path) -> (Vec<String>, Vec<Vec<String>>) {
    let text = std::fs::read_to_string(path).unwrap();
    let mut lines = text.lines().map(|l| l.split(',').map(str::to_string).collect::<Vec<_>>());
    let header = lines.next().unwrap();
    (header, lines.collect())
}

#[test]
fn optimize_writes_both_strategies() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let o = cdpb(&["optimize", "--out", out], &[]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let (header, rows) = read_csv(&dir.path().join("optimize.csv"));
    assert_eq!(header, ["strategy", "tau_min", "tau_max", "rho_opt", "tau_opt", "utility", "gamma", "eps"]);
    assert_eq!(rows.len(), 2);
    assert_eq!(rows[0][0], "idle");
    assert_eq!(rows[1][0], "noisy");
    for r in &rows {
        let eps: f64 = r[7].parse().unwrap();
        assert!(eps <= 100.0);
    }
}

#[test]
fn infeasible_config_writes_diagnostic_and_fails() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let o = cdpb(&["optimize", "--out", out], &[("CDPB_NUM_CLIENTS", "5")]);
    assert_eq!(o.status.code(), Some(2));
    let (_, rows) = read_csv(&dir.path().join("optimize.csv"));
    assert_eq!(rows.len(), 2);
    let (lo, hi): (i64, i64) = (rows[0][1].parse().unwrap(), rows[0][2].parse().unwrap());
    assert!(lo > hi);
    assert_eq!(rows[0][3], "NaN");
}

#[test]
fn train_writes_one_file_per_seed() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let o = cdpb(&["train", "--strategy", "mixed:0.5", "--seed", "3", "--seeds", "2", "--out", out], &[]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    for seed in [3, 4] {
        let (header, rows) = read_csv(&dir.path().join(format!("train_mixed_0.5_{seed}.csv")));
        assert_eq!(header[0], "t");
        assert!(!rows.is_empty());
    }
}

#[test]
fn sweep_accepts_explicit_values() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let o = cdpb(&["sweep", "--axis", "k=25,100", "--out", out], &[]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let (header, rows) = read_csv(&dir.path().join("sweep_k.csv"));
    assert_eq!(header, ["axis_value", "strategy", "metric", "value"]);
    let xs: std::collections::BTreeSet<&str> = rows.iter().map(|r| r[0].as_str()).collect();
    assert_eq!(xs.len(), 2);
}

#[test]
fn rdp_grid_ordering_holds_in_output() {
    let dir = tempfile::tempdir().unwrap();
    let o = cdpb(&["rdp", "--out", dir.path().to_str().unwrap()], &[]);
    assert!(o.status.success());
    let (header, rows) = read_csv(&dir.path().join("rdp.csv"));
    assert_eq!(header, ["alpha", "p", "snr", "oracle", "exact", "bound"]);
    for r in rows {
        let v: Vec<f64> = r[3..].iter().map(|x| x.parse().unwrap()).collect();
        assert!(v[0] <= v[1] && v[1] <= v[2], "{r:?}");
    }
}

#[test]
fn config_file_and_errors() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.json");
    std::fs::write(&cfg, r#"{"eps_bar": 120.0}"#).unwrap();
    let out = dir.path().join("o");
    let o = cdpb(&["optimize", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()], &[]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));

    std::fs::write(&cfg, r#"{"no_such_key": 1}"#).unwrap();
    let o = cdpb(&["optimize", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()], &[]);
    assert_eq!(o.status.code(), Some(2));

    let o = cdpb(&["optimize", "--config", "/definitely/missing.json"], &[]);
    assert_eq!(o.status.code(), Some(4));

    let o = cdpb(&["sweep", "--axis", "nope"], &[]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn repeated_runs_are_byte_identical() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    for d in [&a, &b] {
        let out = d.path().to_str().unwrap();
        assert!(cdpb(&["optimize", "--out", out], &[]).status.success());
        assert!(cdpb(&["sweep", "--axis", "gamma_bar", "--out", out], &[]).status.success());
        assert!(cdpb(&["train", "--strategy", "noisy", "--seeds", "1", "--out", out], &[]).status.success());
    }
    for f in ["optimize.csv", "sweep_gamma_bar.csv", "train_noisy_0.csv"] {
        let x = std::fs::read(a.path().join(f)).unwrap();
        let y = std::fs::read(b.path().join(f)).unwrap();
        assert_eq!(x, y, "{f}");
    }
}

#[test]
fn train_trace_has_tau_rows_and_monotone_eps() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    assert!(cdpb(&["optimize", "--out", out], &[]).status.success());
    assert!(cdpb(&["train", "--strategy", "idle", "--seeds", "1", "--out", out], &[]).status.success());
    let (_, opt) = read_csv(&dir.path().join("optimize.csv"));
    let tau: usize = opt[0][4].parse().unwrap();
    let (header, rows) = read_csv(&dir.path().join("train_idle_0.csv"));
    assert_eq!(
        header,
        ["t", "participants_count", "sigma_q2_realized", "loss_current", "loss_weighted", "eps_cumulative"]
    );
    assert_eq!(rows.len(), tau);
    let eps: Vec<f64> = rows.iter().map(|r| r[5].parse().unwrap()).collect();
    assert!(eps.windows(2).all(|w| w[1] >= w[0]));
    assert!(*eps.last().unwrap() <= 100.0);
}
