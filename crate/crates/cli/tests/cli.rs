use std::path::Path;
use std::process::{Command, Output};

use lupts::dataio::TrajectoryTable;
use lupts::harness::read_rows_csv;
use lupts::synth::{generate_system, sample_trajectories};
use lupts::{RngStream, SystemParams};

fn lupts(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lupts"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn error_json(out: &Output) -> serde_json::Value {
    assert!(!out.status.success());
    let stderr = String::from_utf8_lossy(&out.stderr);
    serde_json::from_str(stderr.trim()).unwrap_or_else(|e| panic!("not JSON ({e}): {stderr}"))
}

/// Simulated T=3, d=4 series with a few blanked state cells.
fn write_fixture(dir: &Path) -> (String, String) {
    let spec = generate_system(&SystemParams::with_defaults(4, 3), &mut RngStream::new(9, 0)).unwrap();
    let ds = sample_trajectories(&spec, 300, &mut RngStream::new(9, 1)).unwrap();
    let mut table = TrajectoryTable::from_dataset(&ds, "outcome");
    for (i, row) in table.states.iter_mut().enumerate().step_by(17) {
        row[i % 12] = None;
    }
    let csv = dir.join("series.csv");
    table.write_csv(&csv, "NA").unwrap();
    let schema = dir.join("schema.json");
    std::fs::write(
        &schema,
        r#"{"T": 3, "d": 4, "outcome_column": "outcome", "missing_marker": "NA"}"#,
    )
    .unwrap();
    (csv.display().to_string(), schema.display().to_string())
}

#[test]
fn ingest_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let (csv, schema) = write_fixture(dir.path());
    let out = dir.path().join("res/ingest");
    let out_s = out.display().to_string();
    let res = lupts(&[
        "ingest", "--csv", &csv, "--schema", &schema,
        "--estimators", "baseline,lupts,distill_seq@tuned",
        "--train-sizes", "20,100", "--replicates", "5", "--seed", "3", "--out", &out_s,
    ]);
    assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));
    let summary: serde_json::Value = serde_json::from_slice(&res.stdout).unwrap();
    assert_eq!(summary["rows"], 2 * 5 * 3);
    assert_eq!(summary["failures"], 0);

    let rows = read_rows_csv(Path::new(&format!("{out_s}.rows.csv"))).unwrap();
    assert_eq!(rows.len(), 30);
    for r in &rows {
        assert!(r.relative_mse.is_none());
        assert!(r.r_squared.unwrap() > 0.0, "{r:?}");
        assert!(r.empirical_risk.unwrap().is_finite());
    }
    assert!(Path::new(&format!("{out_s}.agg.csv")).exists());
    let echo = std::fs::read_to_string(format!("{out_s}.schema.json")).unwrap();
    assert!(echo.contains("\"outcome_column\": \"outcome\""));

    // same seed, same bytes
    let again = dir.path().join("again");
    let again_s = again.display().to_string();
    let res = lupts(&[
        "ingest", "--csv", &csv, "--schema", &schema,
        "--estimators", "baseline,lupts,distill_seq@tuned",
        "--train-sizes", "20,100", "--replicates", "5", "--seed", "3", "--out", &again_s,
    ]);
    assert!(res.status.success());
    assert_eq!(
        std::fs::read(format!("{out_s}.rows.csv")).unwrap(),
        std::fs::read(format!("{again_s}.rows.csv")).unwrap()
    );
}

#[test]
fn ingest_errors_are_json() {
    let dir = tempfile::tempdir().unwrap();
    let (csv, _) = write_fixture(dir.path());
    let wrong = dir.path().join("wrong.json");
    std::fs::write(&wrong, r#"{"T": 4, "d": 4, "outcome_column": "outcome", "missing_marker": "NA"}"#).unwrap();
    let res = lupts(&["ingest", "--csv", &csv, "--schema", wrong.to_str().unwrap(), "--train-sizes", "10"]);
    assert_eq!(error_json(&res)["error"]["kind"], "schema");

    let (csv, schema) = write_fixture(dir.path());
    let res = lupts(&["ingest", "--csv", &csv, "--schema", &schema, "--train-sizes", "100000"]);
    assert_eq!(error_json(&res)["error"]["kind"], "config");
}

#[test]
fn run_from_config_file() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("c.json");
    std::fs::write(
        &config,
        r#"{"d": 3, "T": 3, "n": 40, "m_test": 20, "replicates": 3,
            "sweep": {"axis": "sigma", "values": [0, 1]},
            "estimators": ["baseline", "lupts", "composed_ridge@0.5"]}"#,
    )
    .unwrap();
    let out = dir.path().join("sweep").display().to_string();
    let res = lupts(&["run", "--config", config.to_str().unwrap(), "--out", &out, "--seed", "11"]);
    assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));
    let rows = read_rows_csv(Path::new(&format!("{out}.rows.csv"))).unwrap();
    assert_eq!(rows.len(), 2 * 3 * 3);
    assert!(rows.iter().all(|r| r.seed == 11));
    let echo: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(format!("{out}.config.json")).unwrap()).unwrap();
    assert_eq!(echo["master_seed"], 11);
    assert_eq!(echo["kappa"], 1.5);

    let serial = dir.path().join("serial").display().to_string();
    let res = lupts(&["run", "--config", config.to_str().unwrap(), "--out", &serial, "--seed", "11", "--serial"]);
    assert!(res.status.success());
    assert_eq!(
        std::fs::read(format!("{out}.rows.csv")).unwrap(),
        std::fs::read(format!("{serial}.rows.csv")).unwrap()
    );
}

#[test]
fn presets_and_errors() {
    let res = lupts(&["list-presets"]);
    assert!(res.status.success());
    let names = String::from_utf8(res.stdout).unwrap();
    assert_eq!(names.lines().count(), 7);
    assert!(names.contains("fig2d_markov"));

    let res = lupts(&["run", "--preset", "fig99"]);
    let err = error_json(&res);
    assert_eq!(err["error"]["kind"], "unknown_preset");
    assert!(err["error"]["message"].as_str().unwrap().contains("riskbound_check"));

    let res = lupts(&["run"]);
    assert_eq!(error_json(&res)["error"]["kind"], "usage");

    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, r#"{"estimators": ["ols_plus"]}"#).unwrap();
    let res = lupts(&["run", "--config", bad.to_str().unwrap()]);
    assert_eq!(error_json(&res)["error"]["kind"], "unknown_estimator");

    let res = lupts(&["run", "--preset", "fig2a_samples", "--replicates", "0", "--out", "unused"]);
    assert_eq!(error_json(&res)["error"]["kind"], "config");
}
