use std::path::{Path, PathBuf};
use std::process::Command;

fn configs() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn hjh(args: &[&str], config: &Path, out: &Path) -> (i32, String) {
    let output = Command::new(env!("CARGO_BIN_EXE_hjh"))
        .args(args)
        .arg("--config")
        .arg(config)
        .arg("--out")
        .arg(out)
        .output()
        .unwrap();
    let text = String::from_utf8_lossy(&output.stdout).into_owned() + &String::from_utf8_lossy(&output.stderr);
    (output.status.code().unwrap(), text)
}

#[test]
fn validate_and_cell_pass() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = configs().join("ramp-residual.json");
    let (code, text) = hjh(&["validate"], &cfg, dir.path());
    assert_eq!(code, 0, "{text}");
    assert!(dir.path().join("validation.csv").exists());
    let (code, text) = hjh(&["cell", "--p", "0.5"], &cfg, dir.path());
    assert_eq!(code, 0, "{text}");
    assert!(text.contains("H̄([0.5])"));
    let cell = std::fs::read_to_string(dir.path().join("cell.csv")).unwrap();
    assert_eq!(cell.lines().count(), 65);
}

#[test]
fn effective_writes_the_table() {
    let dir = tempfile::tempdir().unwrap();
    let (code, text) = hjh(&["effective"], &configs().join("ramp-residual.json"), dir.path());
    assert_eq!(code, 0, "{text}");
    assert!(text.contains("PASS drift vs finite differences"));
    let table = std::fs::read_to_string(dir.path().join("table.csv")).unwrap();
    assert!(table.starts_with("p0,hbar,bbar0\n"));
    assert_eq!(table.lines().count(), 1 + 33);
}

#[test]
fn scheme_level_failure_exits_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(configs().join("affine-1d.json")).unwrap()).unwrap();
    cfg["reference"]["n_per"] = 8.into();
    cfg["problem"] = configs().join("ramp-1d.problem.json").to_str().unwrap().into();
    let path = dir.path().join("coarse.json");
    std::fs::write(&path, serde_json::to_string(&cfg).unwrap()).unwrap();
    let (code, text) = hjh(&["compare"], &path, &dir.path().join("out"));
    assert_eq!(code, 2, "{text}");
    assert!(text.contains("FAIL error at scheme level"));
    assert!(dir.path().join("out/rows.csv").exists());
}

#[test]
fn missing_config_exits_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let (code, text) = hjh(&["study"], &dir.path().join("nope.json"), dir.path());
    assert_eq!(code, 1, "{text}");
    assert!(text.starts_with("error:"));
}
