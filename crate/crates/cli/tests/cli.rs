use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use adapt_core::tensor_file::TensorFile;
use adapt_core::trace::Trace;
use serde_json::Value;

fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

fn llm_fixtures() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../core/tests/fixtures/llm")
}

fn adapt(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_adapt")).args(args).output().unwrap()
}

fn stderr_code(out: &Output) -> String {
    let v: Value = serde_json::from_slice(&out.stderr).expect("stderr is JSON");
    v["error"]["code"].as_str().unwrap().to_string()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn plan_from_fixture() {
    let backend = format!("fixture:{}", llm_fixtures().display());
    let out = adapt(&["plan", "A hairy frog", "--backend", &backend]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let map: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(map["pairs"].as_array().unwrap().len(), 1);
    assert_eq!(map["pairs"][0]["frequent"], "A hairy animal");
}

#[test]
fn plan_errors() {
    let backend = format!("fixture:{}", llm_fixtures().display());
    let out = adapt(&["plan", "", "--backend", &backend]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(stderr_code(&out), "EmptyPrompt");

    let port = std::net::TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
    let url = format!("http:http://127.0.0.1:{port}/v1/chat/completions");
    let out = adapt(&["plan", "A hairy frog", "--backend", &url, "--timeout-secs", "2"]);
    assert_eq!(out.status.code(), Some(3));
    assert_eq!(stderr_code(&out), "BackendUnavailable");

    let out = adapt(&["plan", "A hairy frog", "--backend", "carrier-pigeon"]);
    assert_eq!(out.status.code(), Some(2));
}

fn simulate(dir: &Path, name: &str, extra: &[&str]) -> (Output, PathBuf) {
    let out_path = dir.join(name);
    let map = fixture("hairy_frog.concept_map.json");
    let mock = fixture("crossing.mock.json");
    let mut args = vec![
        "simulate",
        "--concept-map",
        p(&map),
        "--mock-config",
        p(&mock),
        "--out",
        p(&out_path),
    ];
    args.extend_from_slice(extra);
    (adapt(&args), out_path)
}

#[test]
fn simulate_and_compare() {
    let dir = tempfile::tempdir().unwrap();
    let (out, aps) = simulate(dir.path(), "aps.ndjson", &[]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let trace = Trace::parse_ndjson(&std::fs::read_to_string(&aps).unwrap()).unwrap();
    trace.validate().unwrap();
    let stops = trace.stop_points();
    assert_eq!((stops[0].t, stops[0].offset), (2, 48));

    let (out, r2f) = simulate(dir.path(), "r2f.ndjson", &["--scheduler", "r2f", "--r2f-levels", "1"]);
    assert!(out.status.success());
    let trace = Trace::parse_ndjson(&std::fs::read_to_string(&r2f).unwrap()).unwrap();
    assert_eq!(trace.header.stop_points, vec![45]);

    let csv = dir.path().join("plot.csv");
    let out = adapt(&["compare", p(&aps), p(&r2f), "--plot-csv", p(&csv)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let report: Value = serde_json::from_slice(&out.stdout).unwrap();
    let d = &report["stop_points"][0];
    assert_eq!(d["a"]["t"], 2);
    assert_eq!(d["b"]["t"], 5);
    assert_eq!(d["delta_t"], -3);
    assert!(std::fs::read_to_string(&csv)
        .unwrap()
        .starts_with("trace,t,offset,token_index,label,z,tau_s\n"));

    let out = adapt(&["compare", p(&aps), p(&aps)]);
    let report: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert!(report["prompt_divergences"].as_array().unwrap().is_empty());
    assert!(report["numeric_divergences"].as_array().unwrap().is_empty());

    let (out, short) = simulate(dir.path(), "short.ndjson", &["--steps", "25"]);
    assert!(out.status.success());
    let out = adapt(&["compare", p(&aps), p(&short)]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(stderr_code(&out), "IncompatibleHeaders");
}

#[test]
fn simulate_rejects_bad_flags() {
    let dir = tempfile::tempdir().unwrap();
    let (out, _) = simulate(dir.path(), "x.ndjson", &["--tau-s", "-1"]);
    assert_eq!(out.status.code(), Some(2));
    let (out, _) = simulate(dir.path(), "x.ndjson", &["--scheduler", "r2f", "--r2f-levels", "7"]);
    assert_eq!(out.status.code(), Some(2));
    let (out, _) = simulate(dir.path(), "x.ndjson", &["--lambda-pool", "1.5"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn embed_commands() {
    let dir = tempfile::tempdir().unwrap();
    let out_path = dir.path().join("pooled.json");
    let out = adapt(&[
        "embed",
        "pem",
        "--c-f",
        p(&fixture("pem_c_f.json")),
        "--c-r",
        p(&fixture("pem_c_r.json")),
        "--out",
        p(&out_path),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let pooled = TensorFile::read(&out_path).unwrap().data;
    assert!((pooled[0] - 0.688187).abs() < 1e-5 && (pooled[1] - 0.188139).abs() < 1e-5);
    let printed: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert!(printed["gamma"].as_f64().is_some() && printed["delta"].as_f64().is_some());

    // Identical inputs: the orthogonal part vanishes, leaving 0.7 x input.
    let out = adapt(&[
        "embed",
        "pem",
        "--c-f",
        p(&fixture("pem_c_f.json")),
        "--c-r",
        p(&fixture("pem_c_f.json")),
        "--out",
        p(&out_path),
    ]);
    assert!(out.status.success());
    let pooled = TensorFile::read(&out_path).unwrap().data;
    assert!((pooled[0] - 0.7).abs() < 1e-6 && (pooled[1] - 0.07).abs() < 1e-6);

    let out = adapt(&[
        "embed",
        "project",
        "--a",
        p(&fixture("pem_c_f.json")),
        "--b",
        p(&fixture("zero.json")),
        "--out",
        p(&out_path),
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(stderr_code(&out), "ZeroNormBase");
}

#[test]
fn score_command() {
    let dir = tempfile::tempdir().unwrap();
    // [height=1, width=2, sequence=3]; position 0 is the start token.
    let block = TensorFile::new(
        vec!["height".into(), "width".into(), "sequence".into()],
        vec![1, 2, 3],
        vec![0.9, 0.1, 0.02, 0.8, 0.3, 0.01],
    )
    .unwrap();
    let path = dir.path().join("block.json");
    block.write(&path, true).unwrap();
    let out = adapt(&["score", p(&path), "--tau-s", "0.025", "--k", "1", "--labels", "hairy,frog"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let report: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(report["positions"], serde_json::json!([1, 2]));
    let scores: Vec<f64> = serde_json::from_value(report["scores"].clone()).unwrap();
    assert!((scores[0] - 0.3).abs() < 1e-6 && (scores[1] - 0.02).abs() < 1e-6);
    assert_eq!(report["transition"], false);
}

#[test]
fn bridge_over_stdio() {
    use std::io::Write;
    let mut child = Command::new(env!("CARGO_BIN_EXE_adapt"))
        .arg("bridge")
        .stdin(std::process::Stdio::piped())
        .stdout(std::process::Stdio::piped())
        .spawn()
        .unwrap();
    child
        .stdin
        .take()
        .unwrap()
        .write_all(b"{\"id\":1,\"op\":\"hello\",\"payload\":{\"version\":1}}\nnot json\n{\"id\":2,\"op\":\"bye\"}\n")
        .unwrap();
    let out = child.wait_with_output().unwrap();
    assert!(out.status.success());
    let lines: Vec<Value> = std::str::from_utf8(&out.stdout)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(lines.len(), 3);
    assert_eq!(lines[0]["op"], "hello_ok");
    assert!(lines[1]["id"].is_null());
    assert_eq!(lines[2]["op"], "bye_ok");
}
