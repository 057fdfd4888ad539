use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

const BIN: &str = env!("CARGO_BIN_EXE_ldlt");

fn ldlt(args: &[&str]) -> Output {
    Command::new(BIN).args(args).output().expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn iris() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/uci/iris.csv")
}

fn quick_config(dir: &Path) -> PathBuf {
    let p = dir.join("quick.toml");
    std::fs::write(&p, "[model]\nwidth = 16\ndepth = 2\n\n[train]\nmax_epochs = 3\n").unwrap();
    p
}

fn train(dir: &Path, kind: &str) -> PathBuf {
    let out = dir.join(format!("{kind}.json"));
    let cfg = quick_config(dir);
    let o = ldlt(&[
        "train",
        "--data",
        iris().to_str().unwrap(),
        "--kind",
        kind,
        "--out",
        out.to_str().unwrap(),
        "--config",
        cfg.to_str().unwrap(),
        "--history",
        dir.join("history.csv").to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("verdict: Certified"));
    out
}

#[test]
fn train_then_verify_certifies() {
    let dir = tempfile::tempdir().unwrap();
    for kind in ["residual", "feedforward"] {
        let model = train(dir.path(), kind);
        let o = ldlt(&["verify", "--model", model.to_str().unwrap()]);
        assert_eq!(code(&o), 0);
        assert!(stdout(&o).contains("verdict: Certified"));
    }
    let history = std::fs::read_to_string(dir.path().join("history.csv")).unwrap();
    assert_eq!(history.lines().count(), 4);
}

fn scale_hex(v: &mut Value, factor: f64) {
    for x in v.as_array_mut().unwrap() {
        let bits = u64::from_str_radix(x.as_str().unwrap().trim_start_matches("0x"), 16).unwrap();
        *x = Value::String(format!("0x{:016x}", (f64::from_bits(bits) * factor).to_bits()));
    }
}

#[test]
fn tampered_model_is_refuted() {
    let dir = tempfile::tempdir().unwrap();
    let model = train(dir.path(), "residual");
    let mut json: Value = serde_json::from_str(&std::fs::read_to_string(&model).unwrap()).unwrap();
    let c = json["weights"]["blocks"][0]["c"].as_array_mut().unwrap();
    scale_hex(&mut c.last_mut().unwrap()["data"], 10.0);
    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, serde_json::to_string(&json).unwrap()).unwrap();
    let dump = dir.path().join("lmi.csv");
    let o = ldlt(&["verify", "--model", bad.to_str().unwrap(), "--dump-lmi", dump.to_str().unwrap()]);
    assert_eq!(code(&o), 1);
    let out = stdout(&o);
    assert!(out.contains("verdict: Refuted"));
    assert!(out.contains("pivot 3 fails"), "{out}");
    let dumped = std::fs::read_to_string(&dump).unwrap();
    let mut lines = dumped.lines();
    assert_eq!(lines.next(), Some("i,j,value"));
    assert!(lines.next().unwrap().starts_with("0,0,"));
}

#[test]
fn certify_reports_every_radius() {
    let dir = tempfile::tempdir().unwrap();
    let model = train(dir.path(), "feedforward");
    let o = ldlt(&[
        "certify",
        "--model",
        model.to_str().unwrap(),
        "--data",
        iris().to_str().unwrap(),
        "--radii",
        "0.1,36/255",
    ]);
    assert_eq!(code(&o), 0);
    let out = stdout(&o);
    assert!(out.contains("samples: 150"));
    assert_eq!(out.matches("certified accuracy @").count(), 2);
}

#[test]
fn eval_all_writes_report() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    std::fs::create_dir(&data).unwrap();
    std::fs::copy(iris(), data.join("iris.csv")).unwrap();
    let out = dir.path().join("report.csv");
    let cfg = quick_config(dir.path());
    let o = ldlt(&[
        "eval-all",
        "--data-dir",
        data.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
        "--config",
        cfg.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let report = std::fs::read_to_string(&out).unwrap();
    let lines: Vec<&str> = report.lines().collect();
    assert!(lines[0].starts_with("dataset,algorithm,clean_mean,clean_std,cert36_mean"));
    assert_eq!(lines.len(), 3);
    assert!(lines[1].starts_with("iris,LDLT-R,"));
}

#[test]
fn usage_errors_exit_two() {
    let o = ldlt(&["verify", "--model", "/nonexistent/model.json"]);
    assert_eq!(code(&o), 2);
    assert_eq!(code(&ldlt(&["train"])), 2);
    assert_eq!(code(&ldlt(&["bogus"])), 2);
    assert_eq!(code(&ldlt(&["--help"])), 0);
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "[train]\nlearning_rate = 1\n").unwrap();
    let o = ldlt(&[
        "train", "--data", iris().to_str().unwrap(), "--kind", "residual",
        "--out", dir.path().join("m.json").to_str().unwrap(), "--config", bad.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 2);
}

#[test]
fn corrupt_model_is_a_runtime_error() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("junk.json");
    std::fs::write(&p, "{\"format_version\": 1}").unwrap();
    assert_eq!(code(&ldlt(&["verify", "--model", p.to_str().unwrap()])), 3);
}
