use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn configs_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn mfg(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mfg-master"))
        .args(args)
        .current_dir(dir)
        .env_remove("MFG_MASTER_OUT")
        .output()
        .unwrap()
}

/// A shipped config with some keys replaced, written into `dir`.
fn derived(name: &str, overrides: &[(&str, &str)], dir: &Path) -> PathBuf {
    let text = std::fs::read_to_string(configs_dir().join(name)).unwrap();
    let mut lines: Vec<String> = text
        .lines()
        .filter(|l| {
            let key = l.split('=').next().unwrap_or("").trim();
            !overrides.iter().any(|(k, _)| *k == key)
        })
        .map(str::to_string)
        .collect();
    lines.extend(overrides.iter().map(|(k, v)| format!("{k} = {v}")));
    let path = dir.join(name);
    std::fs::write(&path, lines.join("\n")).unwrap();
    path
}

fn first_values(csv: &Path) -> Vec<f64> {
    let text = std::fs::read_to_string(csv).unwrap();
    text.lines().nth(1).unwrap().split(',').map(|v| v.parse().unwrap()).collect()
}

#[test]
fn every_shipped_config_solves() {
    let dir = tempfile::tempdir().unwrap();
    for name in ["quadratic_d2.cfg", "quadratic_d2_dbme.cfg", "quadratic_d3.cfg", "cyber.cfg", "zero.cfg"] {
        let cfg = configs_dir().join(name);
        let out = dir.path().join(name);
        let o = mfg(&["solve-oracle", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()], dir.path());
        assert!(o.status.success(), "{name}: {}", String::from_utf8_lossy(&o.stderr));
        assert!(out.join("trajectory.csv").exists() && out.join("manifest.txt").exists());
    }
}

#[test]
fn symmetric_oracle_from_the_shipped_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = configs_dir().join("quadratic_d2.cfg");
    let o = mfg(&["solve-oracle", "--config", cfg.to_str().unwrap(), "--eta", "0.5,0.5", "--out", "o"], dir.path());
    assert!(o.status.success());
    // Long format `t,x,u,mu`: the first two rows are the two states at t = 0.
    let text = std::fs::read_to_string(dir.path().join("o/trajectory.csv")).unwrap();
    for line in text.lines().skip(1).take(2) {
        let row: Vec<f64> = line.split(',').map(|v| v.parse().unwrap()).collect();
        assert_eq!(row[0], 0.0);
        assert!((row[2] - 0.25).abs() < 1e-6, "{row:?}");
    }
}

#[test]
fn typos_fail_only_where_the_section_is_read() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = derived("quadratic_d2.cfg", &[("dgme.iteratons", "3")], dir.path());
    let cfg = cfg.to_str().unwrap();
    let train = mfg(&["train-dgme", "--config", cfg, "--out", "t"], dir.path());
    assert_eq!(train.status.code(), Some(1));
    let stderr = String::from_utf8_lossy(&train.stderr);
    assert!(stderr.contains("dgme.iteratons") && stderr.lines().count() == 1, "{stderr}");
    let solve = mfg(&["solve-oracle", "--config", cfg, "--out", "s"], dir.path());
    assert!(solve.status.success());
}

#[test]
fn method_mismatch_and_missing_files_are_user_errors() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = configs_dir().join("quadratic_d2.cfg");
    let o = mfg(&["train-dbme", "--config", cfg.to_str().unwrap()], dir.path());
    assert_eq!(o.status.code(), Some(1));
    let o = mfg(&["solve-oracle", "--config", "nowhere.cfg"], dir.path());
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("nowhere.cfg"));
}

#[test]
fn short_pipeline_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    let small = [("net.hidden", "12,12"), ("dgme.iterations", "40"), ("dbme.iterations", "5"), ("dbme.intervals", "4")];
    let dgme_cfg = derived("quadratic_d2.cfg", &small[..3], p);
    let dbme_cfg = derived("quadratic_d2_dbme.cfg", &[small[0], small[2], small[3], ("dbme.lipschitz_bound", "1")], p);
    let dgme_cfg = dgme_cfg.to_str().unwrap();
    let dbme_cfg = dbme_cfg.to_str().unwrap();

    let run = |args: &[&str]| {
        let o = mfg(args, p);
        assert!(o.status.success(), "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
    };
    run(&["train-dgme", "--config", dgme_cfg, "--out", "dgme"]);
    run(&["train-dbme", "--config", dbme_cfg, "--out", "dbme"]);
    for f in ["dgme/network.ckpt", "dgme/loss_trace.csv", "dgme/loss_epochs.csv", "dbme/node_0000.ckpt", "dbme/epsilons.csv"] {
        assert!(p.join(f).exists(), "{f}");
    }
    run(&["compare", "--config", dgme_cfg, "--a", "dgme:dgme", "--b", "dbme:dbme", "--samples", "10", "--out", "cmp"]);
    let header = std::fs::read_to_string(p.join("cmp/comparison.csv")).unwrap();
    assert!(header.starts_with("t,mean_abs_diff,sup_abs_diff"));
    run(&["reconstruct", "--config", dgme_cfg, "--surface", "dbme:dbme", "--eta", "0.7,0.3", "--out", "rec"]);
    let row = first_values(&p.join("rec/trajectory.csv"));
    assert_eq!(row[0], 0.0);
    run(&["export", "--config", dgme_cfg, "--kind", "d2-lines", "--surface", "dgme:dgme", "--out", "fig"]);
    run(&["export", "--config", dgme_cfg, "--kind", "loss-curves", "--run", "dbme", "--out", "fig"]);
    assert!(p.join("fig/d2_lines.csv").exists() && p.join("fig/loss_curves.csv").exists());
}

#[test]
fn sample_study_reports_the_slope() {
    let dir = tempfile::tempdir().unwrap();
    let o = mfg(&["sample-study", "--d", "2", "--K", "16,64,256", "--trials", "1000", "--out", "s"], dir.path());
    assert!(o.status.success());
    let text = std::fs::read_to_string(dir.path().join("s/sampling.csv")).unwrap();
    assert_eq!(text.lines().count(), 4);
}
