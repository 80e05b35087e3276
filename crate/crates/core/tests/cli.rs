use std::path::Path;
use std::process::{Command, Output};

fn fod(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fod")).args(args).current_dir(dir).output().expect("fod binary runs")
}

fn write(dir: &Path, name: &str, text: &str) -> String {
    std::fs::write(dir.join(name), text).unwrap();
    name.to_string()
}

const CONDITIONAL: &str = "[dataset]\nname = contract_noise\n[train]\nobjective = sfm\niterations = 0\n[model]\nhidden = 16\nembed_dim = 4\n";

#[test]
fn schedule_csv_layout() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "s.conf", "[schedule]\nT = 20\n");
    let out = fod(&["schedule", "--config", &cfg, "--out", "table.csv"], dir.path());
    assert_eq!(out.status.code(), Some(0));
    let text = std::fs::read_to_string(dir.path().join("table.csv")).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert!(lines[0].starts_with("# fod schedule config_hash="));
    assert_eq!(lines[1], "t,theta,sigma2,mbar,sigbar2,thetabar,alpha");
    let rows = &lines[2..];
    assert_eq!(rows.len(), 21);
    let rate_rows = rows.iter().filter(|r| !r.split(',').nth(1).unwrap().is_empty()).count();
    assert_eq!(rate_rows, 20);
    let summary = String::from_utf8(out.stderr).unwrap();
    assert_eq!(summary.lines().count(), 1);
    assert!(summary.contains("seed=0") && summary.contains("config_hash=") && summary.contains("wall_ms="));
}

#[test]
fn verify_default_config_emits_reports() {
    let dir = tempfile::tempdir().unwrap();
    let out = fod(&["verify", "--n", "20000", "--out", "v.jsonl"], dir.path());
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let text = std::fs::read_to_string(dir.path().join("v.jsonl")).unwrap();
    let mut lines = text.lines();
    assert!(lines.next().unwrap().starts_with("# fod verify"));
    let reports: Vec<serde_json::Value> = lines.map(|l| serde_json::from_str(l).unwrap()).collect();
    assert!(reports.len() >= 20);
    for r in &reports {
        let (s, e, tol) = (r["statistic"].as_f64().unwrap(), r["expected"].as_f64().unwrap(), r["tolerance"].as_f64().unwrap());
        assert_eq!(r["pass"].as_bool().unwrap(), (s - e).abs() <= tol);
        assert!(r["stderr"].as_f64().unwrap() >= 0.0);
    }
}

#[test]
fn eval_of_untrained_checkpoint_matches_source() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "c.conf", CONDITIONAL);
    let out = fod(&["train", "--config", &cfg, "--out", "zero.ckpt"], dir.path());
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let metrics = std::fs::read_to_string(dir.path().join("zero.ckpt.metrics.jsonl")).unwrap();
    assert_eq!(metrics.lines().count(), 1);

    let out = fod(&["eval", "--config", &cfg, "--checkpoint", "zero.ckpt", "--n", "300", "--out", "eval.csv"], dir.path());
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let text = std::fs::read_to_string(dir.path().join("eval.csv")).unwrap();
    let rows: Vec<Vec<&str>> = text.lines().skip(2).map(|l| l.split(',').collect()).collect();
    let value = |name: &str, k: &str| rows.iter().find(|r| r[0] == name && r[1] == k).unwrap()[2].parse::<f64>().unwrap();
    assert!(value("source", "0") > 0.0);
    assert_eq!(value("euler", "1"), value("source", "0"));
    for sampler in ["markov", "nonmarkov", "ode"] {
        for k in ["1", "5", "10", "20"] {
            assert_eq!(value(sampler, k), value("source", "0"), "{sampler} k={k}");
        }
    }
}

#[test]
fn sample_writes_every_visited_state() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "c.conf", CONDITIONAL);
    assert_eq!(fod(&["train", "--config", &cfg, "--out", "m.ckpt"], dir.path()).status.code(), Some(0));
    let out = fod(
        &["sample", "--config", &cfg, "--checkpoint", "m.ckpt", "--sampler", "markov", "--k", "30", "--n", "4", "--out", "t.csv"],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(0));
    let text = std::fs::read_to_string(dir.path().join("t.csv")).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[1], "chain,step,x0,x1");
    // grid 0, 30, 60, 90, 100 for each of 4 chains
    assert_eq!(lines.len() - 2, 4 * 5);
    assert!(lines[2..].iter().filter(|l| l.starts_with("0,")).map(|l| l.split(',').nth(1).unwrap()).eq(["0", "30", "60", "90", "100"]));
}

#[test]
fn config_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let bad = write(dir.path(), "bad.conf", "[schedule]\nT = abc\n");
    let out = fod(&["schedule", "--config", &bad, "--out", "x.csv"], dir.path());
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8(out.stderr).unwrap();
    assert!(err.contains("line 2") && err.contains("'T'"), "{err}");
    assert!(!dir.path().join("x.csv").exists());

    let unknown = write(dir.path(), "u.conf", "[train]\nlearning_rate = 1\n");
    assert_eq!(fod(&["verify", "--config", &unknown, "--out", "v.jsonl"], dir.path()).status.code(), Some(2));
    assert_eq!(fod(&["schedule", "--set", "schedule.nope=1", "--out", "x.csv"], dir.path()).status.code(), Some(2));
    assert_eq!(fod(&["train", "--out", "m.ckpt"], dir.path()).status.code(), Some(2));
    assert_eq!(fod(&["schedule"], dir.path()).status.code(), Some(2));
}

#[test]
fn module_errors_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "c.conf", CONDITIONAL);
    let out = fod(&["eval", "--config", &cfg, "--checkpoint", "missing.ckpt", "--out", "e.csv"], dir.path());
    assert_eq!(out.status.code(), Some(1));
    std::fs::write(dir.path().join("junk.ckpt"), b"not a checkpoint").unwrap();
    let out = fod(&["sample", "--config", &cfg, "--checkpoint", "junk.ckpt", "--out", "t.csv"], dir.path());
    assert_eq!(out.status.code(), Some(1));
    assert!(!dir.path().join("t.csv").exists());
}

#[test]
fn seed_flag_and_overrides_change_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "c.conf", &CONDITIONAL.replace("iterations = 0", "iterations = 20\neval_every = 10\neval_n = 50"));
    fod(&["train", "--config", &cfg, "--out", "a.ckpt"], dir.path());
    fod(&["train", "--config", &cfg, "--out", "b.ckpt", "--seed", "9"], dir.path());
    fod(&["train", "--config", &cfg, "--out", "c.ckpt", "--set", "train.lr=1e-3"], dir.path());
    let read = |f: &str| std::fs::read(dir.path().join(f)).unwrap();
    assert_ne!(read("a.ckpt"), read("b.ckpt"));
    assert_ne!(read("a.ckpt"), read("c.ckpt"));
    let header = String::from_utf8_lossy(&read("b.ckpt")[..120]).to_string();
    assert!(header.contains("seed=9") && header.contains("config_hash="));
    let metrics = String::from_utf8(read("b.ckpt.metrics.jsonl")).unwrap();
    assert!(metrics.starts_with("# fod train config_hash=") && metrics.lines().next().unwrap().ends_with("seed=9"));
    assert_eq!(metrics.lines().count(), 3);
}
