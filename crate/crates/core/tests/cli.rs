use std::path::Path;
use std::process::{Command, Output};

use attnsketch::{mat_store, DenseMatrix};

fn bin(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_attnsketch")).args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = bin(args);
    assert!(out.status.success(), "{args:?} failed:\n{}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

const ENGINE: &[&str] = &["--k-sparse", "4", "--eps1", "0.5", "--eps2", "0.2", "--delta", "0.1", "--degree", "4", "--seed", "3"];

#[test]
fn gen_run_verify_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let inst = dir.path().join("inst");
    ok(&["gen", "--n", "64", "--d", "2", "--k", "4", "--profile", "spiky", "--seed", "9", "--out-dir", p(&inst), "--frames"]);
    for f in ["Q.matf", "K.matf", "V.matf", "stream.frames"] {
        assert!(inst.join(f).exists(), "{f}");
    }

    let run = dir.path().join("run");
    let (q, k, v) = (inst.join("Q.matf"), inst.join("K.matf"), inst.join("V.matf"));
    let mut args = vec!["run", "--q", p(&q), "--k-mat", p(&k), "--v", p(&v), "--out", p(&run)];
    args.extend(ENGINE);
    ok(&args);
    let t = std::fs::read_to_string(run.join("T.txt")).unwrap();
    assert!(t.lines().count() <= 2 * 8);

    let stdout = ok(&["verify", "--run-report", p(&run.join("run.json")), "--oracle-mode", "sketched"]);
    assert!(stdout.contains("pass rate"));
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(run.join("error_report.json")).unwrap()).unwrap();
    assert_eq!(report["sparsity_ok"], true);
    assert!(report["columns"][0]["sketch_gap"].is_number());

    // the framed stream produces the same output file
    let run2 = dir.path().join("run2");
    let frames = inst.join("stream.frames");
    let mut args = vec!["run", "--stream", p(&frames), "--n", "64", "--d", "2", "--out", p(&run2)];
    args.extend(ENGINE);
    ok(&args);
    assert_eq!(t, std::fs::read_to_string(run2.join("T.txt")).unwrap());
    ok(&["verify", "--run-report", p(&run2.join("run.json"))]);
}

#[test]
fn identity_cross_run_matches_plain_run() {
    let dir = tempfile::tempdir().unwrap();
    let inst = dir.path().join("inst");
    ok(&["gen", "--n", "48", "--d", "3", "--seed", "1", "--out-dir", p(&inst)]);
    let eye = dir.path().join("I.matf");
    mat_store(&DenseMatrix::identity(3), &eye).unwrap();

    // plain run on (Q, V, V) against cross run on X1 = Q, X2 = V
    let plain = dir.path().join("plain");
    let (q, v) = (inst.join("Q.matf"), inst.join("V.matf"));
    let mut args = vec!["run", "--q", p(&q), "--k-mat", p(&v), "--v", p(&v), "--out", p(&plain)];
    args.extend(ENGINE);
    ok(&args);
    let cross = dir.path().join("cross");
    let mut args = vec!["run-cross", "--x1", p(&q), "--x2", p(&v), "--wq", p(&eye), "--wk", p(&eye), "--wv", p(&eye)];
    args.extend(["--out", p(&cross)]);
    args.extend(ENGINE);
    ok(&args);
    assert_eq!(
        std::fs::read_to_string(plain.join("T.txt")).unwrap(),
        std::fs::read_to_string(cross.join("T.txt")).unwrap()
    );
    ok(&["verify", "--run-report", p(&cross.join("run.json"))]);
}

#[test]
fn verify_flags_dense_output() {
    let dir = tempfile::tempdir().unwrap();
    let inst = dir.path().join("inst");
    ok(&["gen", "--n", "32", "--d", "2", "--out-dir", p(&inst)]);
    let run = dir.path().join("run");
    let (q, k, v) = (inst.join("Q.matf"), inst.join("K.matf"), inst.join("V.matf"));
    let mut args = vec!["run", "--q", p(&q), "--k-mat", p(&k), "--v", p(&v), "--out", p(&run)];
    args.extend(ENGINE);
    ok(&args);
    let dense: String = (0..32).map(|i| format!("0 {i} 1e-3\n")).collect();
    std::fs::write(run.join("T.txt"), dense).unwrap();
    let out = bin(&["verify", "--run-report", p(&run.join("run.json"))]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("nonzeros"));
}

#[test]
fn bench_memory_pinned_is_flat() {
    let dir = tempfile::tempdir().unwrap();
    let json = dir.path().join("mem.json");
    let stdout = ok(&["bench-memory", "--n-list", "256,1024,4096", "--pin-dims", "--stream-rows", "--json", p(&json)]);
    assert!(stdout.contains("identical across n: true"));
    let reports: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&json).unwrap()).unwrap();
    assert_eq!(reports.as_array().unwrap().len(), 3);
    assert_eq!(reports[0]["breakdown"], reports[2]["breakdown"]);
}

#[test]
fn bad_input_exits_with_error() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("missing.matf");
    let out = bin(&["run", "--q", p(&missing), "--k-mat", p(&missing), "--v", p(&missing), "--out", p(dir.path())]);
    assert_eq!(out.status.code(), Some(2));
    let out = bin(&["run", "--stream", p(&missing), "--out", p(dir.path())]);
    assert_eq!(out.status.code(), Some(2));
}
