use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn sim(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mmf-sim"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn write(dir: &Path, name: &str, text: &str) -> String {
    let p = dir.join(name);
    fs::write(&p, text).unwrap();
    p.to_str().unwrap().to_string()
}

const TINY: &str = "name = \"tiny\"\nn_agents = 2\nhorizon = 20\nruns = 2\n";

#[test]
fn run_then_report() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "tiny.toml", TINY);
    let out = dir.path().join("out");
    let o = sim(&["run", "--config", &cfg, "--out", out.to_str().unwrap(), "--method", "entitlement,det_nsp_bs"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    for f in ["summary.csv", "agents.csv", "metadata.json"] {
        assert!(out.join(f).exists(), "{f}");
    }
    let rep = dir.path().join("report.csv");
    let o = sim(&["report", "--in", out.to_str().unwrap(), "--out", rep.to_str().unwrap()]);
    assert!(o.status.success());
    let text = fs::read_to_string(rep).unwrap();
    assert!(text.starts_with("method,t,runs,mean_cum_loss,stderr_cum_loss"));
    assert_eq!(text.lines().count(), 1 + 2 * 20);
}

#[test]
fn overrides_change_the_output() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "tiny.toml", TINY);
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    let args = |out: &Path, seed: &str| {
        sim(&["run", "--config", &cfg, "--out", out.to_str().unwrap(), "--seed", seed, "--runs", "1", "--method", "entitlement"])
    };
    assert!(args(&a, "1").status.success());
    assert!(args(&b, "2").status.success());
    let sa = fs::read_to_string(a.join("summary.csv")).unwrap();
    let sb = fs::read_to_string(b.join("summary.csv")).unwrap();
    assert_ne!(sa, sb);
    assert_eq!(sa.lines().count(), 2 + 20);
}

#[test]
fn validation_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let out = out.to_str().unwrap();
    let bad = write(dir.path(), "bad.toml", "name = \"x\"\nn_agents = 2\nentitlements = [0.5, 0.6]\n");
    let o = sim(&["run", "--config", &bad, "--out", out]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("entitlements"));

    let unknown = write(dir.path(), "unknown.toml", "name = \"x\"\nn_agents = 2\ncolour = 3\n");
    assert_eq!(sim(&["run", "--config", &unknown, "--out", out]).status.code(), Some(2));

    let mixed = write(dir.path(), "mixed.toml", "name = \"x\"\nn_agents = 2\nmethod = \"det_nsp_bs\"\nfeedback = \"bernoulli_aggregate\"\n");
    assert_eq!(sim(&["run", "--config", &mixed, "--out", out]).status.code(), Some(2));

    let ok = write(dir.path(), "ok.toml", TINY);
    assert_eq!(sim(&["run", "--config", &ok, "--out", out, "--method", "nope"]).status.code(), Some(2));
}

#[test]
fn runtime_errors_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("missing.toml");
    let o = sim(&["run", "--config", missing.to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("missing.toml"));

    let rep = dir.path().join("r.csv");
    let o = sim(&["report", "--in", dir.path().join("nowhere").to_str().unwrap(), "--out", rep.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn bench_tree_prints_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "tiny.toml", TINY);
    let o = sim(&["bench-tree", "--config", &cfg, "--reps", "5"]);
    assert!(o.status.success());
    let text = String::from_utf8_lossy(&o.stdout);
    for p in ["100,", "1000,", "10000,"] {
        assert!(text.contains(p), "{text}");
    }
}
