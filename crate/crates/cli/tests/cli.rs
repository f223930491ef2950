use std::path::Path;
use std::process::{Command, Output};

fn pimdcc(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pimdcc"))
        .args(args)
        .current_dir(dir)
        .output()
        .unwrap()
}

fn tune_red(dir: &Path) {
    let o = pimdcc(
        dir,
        &[
            "tune",
            "--kernel",
            "red",
            "--extents",
            "1,1024",
            "--backend",
            "hbm-pim-like",
            "--out",
            "t",
        ],
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn tune_then_simulate_checks_out() {
    let dir = tempfile::tempdir().unwrap();
    tune_red(dir.path());
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("t/report.json")).unwrap())
            .unwrap();
    assert!(report["cost"]["t_total"].as_f64().unwrap() > 0.0);
    let o = pimdcc(
        dir.path(),
        &[
            "simulate",
            "--plan",
            "t/plan.json",
            "--check-against-reference",
            "--out",
            "s",
        ],
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(dir.path().join("s/outputs.txt").exists());
}

#[test]
fn gemv_on_attacc_tunes() {
    let dir = tempfile::tempdir().unwrap();
    let o = pimdcc(
        dir.path(),
        &[
            "tune",
            "--kernel",
            "gemv",
            "--extents",
            "1,128,1024",
            "--backend",
            "attacc-like",
        ],
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(!o.stdout.is_empty());
}

#[test]
fn usage_errors_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(
        pimdcc(dir.path(), &["tune", "--kernel", "red"])
            .status
            .code(),
        Some(1)
    );
    assert_eq!(
        pimdcc(dir.path(), &["tune", "--bogus"]).status.code(),
        Some(1)
    );
    let o = pimdcc(
        dir.path(),
        &[
            "tune",
            "--kernel",
            "red",
            "--extents",
            "1,64",
            "--backend",
            "nope",
        ],
    );
    assert_eq!(o.status.code(), Some(1));
    assert_eq!(pimdcc(dir.path(), &["--help"]).status.code(), Some(0));
}

#[test]
fn corrupted_plan_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("bad.json"), "{\"kernel\": 3}").unwrap();
    let o = pimdcc(dir.path(), &["simulate", "--plan", "bad.json"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn tampered_plan_mismatches_the_reference() {
    let dir = tempfile::tempdir().unwrap();
    tune_red(dir.path());
    let path = dir.path().join("t/plan.json");
    let mut plan: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&path).unwrap()).unwrap();
    let blocks = plan["blocks"].as_array_mut().unwrap();
    let compute = blocks
        .iter()
        .position(|b| b["kind"]["kind"] == "compute")
        .unwrap();
    blocks.remove(compute);
    std::fs::write(&path, plan.to_string()).unwrap();
    let o = pimdcc(
        dir.path(),
        &[
            "simulate",
            "--plan",
            "t/plan.json",
            "--check-against-reference",
        ],
    );
    assert_eq!(
        o.status.code(),
        Some(2),
        "{}",
        String::from_utf8_lossy(&o.stderr)
    );
}

#[test]
fn compile_writes_the_layout() {
    let dir = tempfile::tempdir().unwrap();
    let o = pimdcc(
        dir.path(),
        &[
            "compile",
            "--kernel",
            "va",
            "--extents",
            "256",
            "--backend",
            "hbm-pim-like",
            "--draft",
            "[[4,8,A0^i]]",
            "--out",
            "p.json",
            "--emit-layout",
            "l.json",
        ],
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(dir.path().join("p.json").exists() && dir.path().join("l.json").exists());
}
