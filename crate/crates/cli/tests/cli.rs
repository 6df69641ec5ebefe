use std::path::Path;
use std::process::{Command, Output};

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_rte-inverse"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn configs() -> &'static Path {
    Path::new(concat!(env!("CARGO_MANIFEST_DIR"), "/../../configs"))
}

fn report(dir: &Path) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(dir.join("report.json")).unwrap()).unwrap()
}

#[test]
fn void_medium_is_flagged_ballistic_only() {
    let out = tempfile::tempdir().unwrap();
    let cfg = configs().join("void.toml");
    let o = run(&[
        "forward",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        out.path().to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let r = report(out.path());
    assert_eq!(r["flags"][0], "ballistic-only");
    let text = std::fs::read_to_string(out.path().join("outflow.csv")).unwrap();
    let mut rdr = csv::Reader::from_reader(text.as_bytes());
    let phi: Vec<f64> = rdr
        .records()
        .map(|r| r.unwrap()[5].parse().unwrap())
        .collect();
    assert_eq!(phi.iter().filter(|v| **v != 0.0).count(), 1);
}

#[test]
fn config_errors_list_every_key_and_exit_2() {
    let out = tempfile::tempdir().unwrap();
    let o = run(&[
        "forward",
        "--out",
        out.path().to_str().unwrap(),
        "nope=1",
        "nx=\"x\"",
        "tol=-1",
    ]);
    assert_eq!(o.status.code(), Some(2));
    let err: serde_json::Value = serde_json::from_slice(&o.stderr).unwrap();
    assert_eq!(err["error"], "config");
    let details = err["details"].as_array().unwrap();
    assert!(details
        .iter()
        .any(|d| d.as_str().unwrap().starts_with("nope")));
    assert!(details
        .iter()
        .any(|d| d.as_str().unwrap().starts_with("nx")));
}

#[test]
fn semantic_errors_exit_2() {
    let o = run(&["forward", "tol=-1", "kn_list=[0.1, 0.5]"]);
    assert_eq!(o.status.code(), Some(2));
    let err: serde_json::Value = serde_json::from_slice(&o.stderr).unwrap();
    assert_eq!(err["details"].as_array().unwrap().len(), 2);
}

#[test]
fn solver_failure_exits_3() {
    let out = tempfile::tempdir().unwrap();
    let o = run(&[
        "forward",
        "--out",
        out.path().to_str().unwrap(),
        "nx=8",
        "nv=8",
        "max_iter=1",
        "tol=1e-14",
    ]);
    assert_eq!(
        o.status.code(),
        Some(3),
        "{}",
        String::from_utf8_lossy(&o.stderr)
    );
}

#[test]
fn missed_threshold_exits_4_only_with_check() {
    let out = tempfile::tempdir().unwrap();
    let dir = out.path().to_str().unwrap();
    let args = [
        "recover-k",
        "--out",
        dir,
        "nx=8",
        "nv=8",
        "k_experiments=2",
        "k_max_iter=1",
    ];
    assert_eq!(run(&args).status.code(), Some(0));
    let mut strict = args.to_vec();
    strict.push("--check");
    assert_eq!(run(&strict).status.code(), Some(4));
}

#[test]
fn report_echoes_input_and_seed() {
    let out = tempfile::tempdir().unwrap();
    let cfg = configs().join("recover_k.toml");
    let o = run(&[
        "recover-k",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        out.path().to_str().unwrap(),
        "--seed",
        "7",
        "k_experiments=3",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let r = report(out.path());
    assert_eq!(r["seed"], 7);
    assert_eq!(r["config_input"]["k_experiments"], 3);
    assert_eq!(r["config_input"]["k_truth"][0], 0.4);
    assert_eq!(r["config_resolved"]["nv"], 16);
    assert!(!r["timings"].as_array().unwrap().is_empty());
}

#[test]
fn seeded_anchor_draw_is_reproducible() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    for d in [&a, &b] {
        let o = run(&[
            "recover-k",
            "--out",
            d.path().to_str().unwrap(),
            "nx=8",
            "nv=8",
            "k_experiments=3",
            "--seed",
            "11",
        ]);
        assert!(o.status.success());
    }
    let ta = std::fs::read(a.path().join("k_trace.csv")).unwrap();
    let tb = std::fs::read(b.path().join("k_trace.csv")).unwrap();
    assert_eq!(ta, tb);
    assert_eq!(
        report(a.path())["metrics"]["anchors"],
        report(b.path())["metrics"]["anchors"]
    );
}
