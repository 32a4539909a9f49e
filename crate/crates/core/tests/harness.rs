use std::path::PathBuf;

use hjh_core::error::Error;
use hjh_core::harness::{
    emit_report, fit_rates, run_study, FitStatus, StudyConfig, StudyMode, StudyReport,
};

fn config(name: &str) -> StudyConfig {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(name);
    StudyConfig::load(&path).unwrap()
}

#[test]
fn fit_recovers_geometric_rates() {
    let one = fit_rates(&[(0.5, 1e-1), (0.25, 5e-2), (0.125, 2.5e-2)]).unwrap();
    assert!((one.slope - 1.0).abs() < 1e-12);
    let (lo, hi) = one.ci.unwrap();
    assert!(lo <= 1.0 + 1e-12 && hi >= 1.0 - 1e-12);
    let two = fit_rates(&[(0.5, 4e-2), (0.25, 1e-2), (0.125, 2.5e-3)]).unwrap();
    assert!((two.slope - 2.0).abs() < 1e-12);
}

#[test]
fn fit_drops_floor_rows() {
    let fit = fit_rates(&[(0.5, 4e-2), (0.25, 1e-2), (0.125, 2.5e-3), (0.0625, 1e-12)]).unwrap();
    assert_eq!(fit.points, 3);
    assert!((fit.slope - 2.0).abs() < 1e-12);
    let exact = fit_rates(&[(0.5, 1e-13), (0.25, 0.0), (0.125, 1e-12)]).unwrap();
    assert_eq!(exact.status, FitStatus::Exact);
    assert!(exact.meets(3));
}

#[test]
fn fit_needs_three_rows() {
    assert!(matches!(fit_rates(&[(0.5, 1.0), (0.25, 0.5)]), Err(Error::InsufficientRows(_))));
}

#[test]
fn config_invariants() {
    let mut cfg = config("ramp-residual.json");
    assert!(cfg.check().is_ok());
    cfg.eps = vec![0.125, 0.25];
    assert!(cfg.check().is_err());
    cfg.eps = vec![1.0, 0.5];
    assert!(cfg.check().is_err());
    let mut cfg = config("ramp-residual.json");
    cfg.schema_version = 99;
    assert!(cfg.check().is_err());
    let text = config("ramp-end-to-end.json").to_json().unwrap();
    assert_eq!(StudyConfig::from_json(&text).unwrap().mode, StudyMode::EndToEnd);
}

#[test]
fn empty_report_has_headers_only() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config("ramp-residual.json");
    let report: StudyReport = serde_json::from_value(serde_json::json!({
        "config": serde_json::to_value(&cfg).unwrap(),
        "rows": [], "slopes": [], "timings": [], "stages": [],
        "insulation": null, "affine": false, "failure": null,
        "environment": { "package": "x", "version": "0", "os": "", "arch": "", "threads": 1, "schema_version": 1 }
    }))
    .unwrap();
    emit_report(&report, dir.path()).unwrap();
    let rows = std::fs::read_to_string(dir.path().join("rows.csv")).unwrap();
    assert_eq!(rows, "eps,m,sup_error,max_residual\n");
    let slopes = std::fs::read_to_string(dir.path().join("slopes.csv")).unwrap();
    assert_eq!(slopes.lines().count(), 1);
}

#[test]
fn residual_study_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = config("ramp-residual.json");
    cfg.eps = vec![0.25, 0.125, 0.0625, 0.03125];
    cfg.output_dir = Some(dir.path().join("a"));
    let report = run_study(&cfg).unwrap();
    assert!(report.passed(), "{:?}", report.checks());
    assert!(report.stages.iter().all(|s| !s.starts_with("reference")));
    assert!(report.stages.iter().any(|s| s.starts_with("residual")));
    let first = std::fs::read(dir.path().join("a/rows.csv")).unwrap();
    assert_eq!(String::from_utf8_lossy(&first).lines().count(), 13);
    cfg.output_dir = Some(dir.path().join("b"));
    run_study(&cfg).unwrap();
    assert_eq!(first, std::fs::read(dir.path().join("b/rows.csv")).unwrap());
    for f in ["slopes.csv", "errors.dat", "residuals.dat", "stages.log", "checks.csv"] {
        let a = std::fs::read(dir.path().join("a").join(f)).unwrap();
        let b = std::fs::read(dir.path().join("b").join(f)).unwrap();
        assert!(a == b, "{f} differs between runs");
    }
}

#[test]
fn end_to_end_study_runs_the_reference() {
    let mut cfg = config("ramp-end-to-end.json");
    cfg.eps = vec![0.25, 0.125, 0.0625];
    cfg.reference.n_per = 32;
    let report = run_study(&cfg).unwrap();
    assert!(report.stages.iter().filter(|s| s.starts_with("reference")).count() == 3);
    assert!(report.insulation.unwrap() <= 1e-9);
    assert!(report.rows.iter().all(|r| r.sup_error.is_some() && r.max_residual.is_none()));
    assert!(report.passed(), "{:?}", report.checks());
}

#[test]
fn failure_persists_a_partial_report() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = config("ramp-residual.json");
    cfg.table.p_lo = vec![0.7];
    cfg.table.p_hi = vec![1.3];
    cfg.output_dir = Some(dir.path().to_path_buf());
    let err = run_study(&cfg).unwrap_err();
    assert!(matches!(err, Error::Stage { ref stage, .. } if stage == "validate_initial_data"), "{err}");
    let log = std::fs::read_to_string(dir.path().join("stages.log")).unwrap();
    assert!(log.contains("failed: stage `validate_initial_data`"));
    let rows = std::fs::read_to_string(dir.path().join("rows.csv")).unwrap();
    assert_eq!(rows.lines().count(), 1);
}

#[test]
fn two_dimensional_configs_reject_end_to_end() {
    let mut cfg = config("ramp-2d-residual.json");
    cfg.mode = StudyMode::Both;
    assert!(matches!(run_study(&cfg), Err(Error::InvalidInput(_))));
}
