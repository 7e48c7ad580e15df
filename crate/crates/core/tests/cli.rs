use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;
use tempfile::TempDir;

fn golden(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/golden").join(name)
}

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_layoutforge")).args(args).output().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn write(dir: &TempDir, name: &str, text: &str) -> PathBuf {
    let p = dir.path().join(name);
    fs::write(&p, text).unwrap();
    p
}

#[test]
fn empty_plan_compiles_naive_program() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("out");
    let o = run(&["compile", "--graph", "c2d", "-o", s(&out)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let v = json(&out.join("verdict.json"));
    assert_eq!(v["ok"], true);
    assert!(v["mismatch"].is_null());
    assert!(fs::read_to_string(out.join("program.txt")).unwrap().starts_with("for "));
}

#[test]
fn tiled_plan_matches_golden_program() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("out");
    let o = run(&[
        "compile",
        "--graph",
        s(&golden("conv_tiled.graph.json")),
        "--plan",
        s(&golden("conv_tiled.plan.json")),
        "--sched",
        s(&golden("conv_tiled.sched.json")),
        "-o",
        s(&out),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let got = fs::read_to_string(out.join("program.txt")).unwrap();
    assert_eq!(got, fs::read_to_string(golden("conv_tiled.program.txt")).unwrap());
    assert_eq!(json(&out.join("verdict.json"))["ok"], true);
}

#[test]
fn corrupted_json_exits_2() {
    let dir = TempDir::new().unwrap();
    let bad = write(&dir, "bad.json", "{\"assignments\": [");
    let out = dir.path().join("out");
    let o = run(&["compile", "--graph", "c2d", "--plan", s(&bad), "-o", s(&out)]);
    assert_eq!(code(&o), 2);
    assert!(!o.stderr.is_empty());
    let o = run(&["compile", "--graph", s(&bad), "-o", s(&out)]);
    assert_eq!(code(&o), 2);
}

#[test]
fn invalid_plan_and_config_exit_2() {
    let dir = TempDir::new().unwrap();
    // split factors that do not multiply to the extent
    let plan = write(&dir, "p.json", r#"{"assignments":{"Conv":[{"op":"split","dim":2,"factors":[3,3]}]}}"#);
    let out = dir.path().join("out");
    assert_eq!(code(&run(&["compile", "--graph", "c2d", "--plan", s(&plan), "-o", s(&out)])), 2);
    let r = dir.path().join("r.json");
    assert_eq!(code(&run(&["tune", "--graph", "c2d", "--budget", "8", "--joint", "16", "-o", s(&r)])), 2);
    assert_eq!(code(&run(&["tune", "--graph", "c2d", "--levels", "3", "-o", s(&r)])), 2);
    let cache = write(&dir, "c.json", r#"{"line_elems":0,"num_lines":4,"prefetch_lines":1}"#);
    assert_eq!(code(&run(&["tune", "--graph", "c2d", "--cache", s(&cache), "-o", s(&r)])), 2);
    assert_eq!(code(&run(&["bench", "--graph", "c2d", "--plans", s(&plan), "-o", s(&r)])), 2);
    assert_eq!(code(&run(&["tune", "--graph", "nope", "-o", s(&r)])), 2);
    assert_eq!(code(&run(&["frobnicate"])), 2);
    assert!(!r.exists());
}

#[test]
fn tune_is_byte_identical_and_resimulates() {
    let dir = TempDir::new().unwrap();
    let (a, b) = (dir.path().join("a.json"), dir.path().join("b.json"));
    let args = |o: &Path| {
        vec![
            "tune".to_string(),
            "--graph".into(),
            "gmm".into(),
            "--budget".into(),
            "24".into(),
            "--joint".into(),
            "12".into(),
            "--seed".into(),
            "3".into(),
            "-o".into(),
            s(o).into(),
        ]
    };
    for p in [&a, &b] {
        let o = Command::new(env!("CARGO_BIN_EXE_layoutforge")).args(args(p)).output().unwrap();
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    }
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());

    let report = json(&a);
    assert_eq!(report["history"].as_array().unwrap().len(), 24);
    let plan = write(&dir, "plan.json", &report["plan"].to_string());
    let sched = write(&dir, "sched.json", &report["schedules"].to_string());
    let out = dir.path().join("out");
    let o = run(&["compile", "--graph", "gmm", "--plan", s(&plan), "--sched", s(&sched), "-o", s(&out)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let v = json(&out.join("verdict.json"));
    assert_eq!(v["counters"], report["counters"]);
    assert_eq!(v["counters"]["cost"], report["best_cost"]);
}

#[test]
fn loop_only_stage_keeps_the_plan() {
    let dir = TempDir::new().unwrap();
    let plan = write(&dir, "p.json", r#"{"assignments":{"C":[{"op":"split","dim":2,"factors":[4,8]},{"op":"reorder","perm":[2,1,3]}]}}"#);
    let r = dir.path().join("r.json");
    let o = run(&["tune", "--graph", "gmm", "--budget", "16", "--stage", "loop-only", "--plan", s(&plan), "-o", s(&r)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let report = json(&r);
    assert_eq!(report["rebuilds"]["loop_only"], 0);
    assert_eq!(report["rebuilds"]["joint"], 0);
    assert!(report["history"].as_array().unwrap().iter().all(|h| h["stage"] == "loop-only"));
    assert_eq!(report["plan"]["assignments"]["C"], json(&plan)["assignments"]["C"]);
    // a plan is only accepted by the loop-only stage
    let o = run(&["tune", "--graph", "gmm", "--plan", s(&plan), "-o", s(&r)]);
    assert_eq!(code(&o), 2);
}

#[test]
fn bench_rows() {
    let dir = TempDir::new().unwrap();
    let empty = write(&dir, "naive.json", "{}");
    let same = write(&dir, "also_naive.json", "{}");
    let r = dir.path().join("bench.json");
    let o = run(&["bench", "--graph", "gmm", "--plans", s(&empty), "--budget", "8", "-o", s(&r)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(json(&r).as_array().unwrap().len(), 1);

    let o = run(&["bench", "--graph", "gmm", "--plans", s(&empty), s(&same), "--budget", "8", "-o", s(&r)]);
    assert_eq!(code(&o), 0);
    let rows = json(&r);
    let rows = rows.as_array().unwrap();
    assert_eq!(rows.len(), 2);
    assert_eq!(rows[0]["counters"], rows[1]["counters"]);
}
