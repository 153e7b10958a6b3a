use std::path::Path;
use std::process::{Command, Output};

use rsv_core::data::{write_csv, Dataset, Mode, UnitRecord};
use rsv_core::dgp::{gen_calibrated, DgpSpec};

fn rsv(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_rsv")).args(args).env("RSV_THREADS", "1").output().expect("binary runs")
}

fn calibrated_csv(dir: &Path, spec: DgpSpec) -> String {
    let path = dir.join("data.csv");
    write_csv(&gen_calibrated(&spec).unwrap().data, &path).unwrap();
    path.to_string_lossy().into_owned()
}

fn json(path: impl AsRef<Path>) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn estimate_writes_result_and_echo() {
    let dir = tempfile::tempdir().unwrap();
    let data = calibrated_csv(dir.path(), DgpSpec::calibrated(0.2, 800, 1));
    let out = dir.path().join("out");
    let o = rsv(&["estimate", "--data", &data, "--bootstrap", "50", "--alpha", "0.10", "--seed", "3", "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let v = json(out.join("estimate.json"));
    let r = &v["result"];
    assert!(r["theta_hat"].as_f64().unwrap().is_finite());
    assert!(r["se"].as_f64().unwrap() > 0.0);
    assert!(r["ci_low"].as_f64().unwrap() <= r["ci_high"].as_f64().unwrap());
    assert_eq!(v["run_config"]["command"], "estimate");
    assert_eq!(v["run_config"]["bootstrap"], 50);
    let csv = std::fs::read_to_string(out.join("estimate.csv")).unwrap();
    assert!(csv.starts_with("# run_config: {"));
    assert_eq!(csv.lines().count(), 3);
}

#[test]
fn identical_flags_give_identical_bytes() {
    let dir = tempfile::tempdir().unwrap();
    let data = calibrated_csv(dir.path(), DgpSpec::calibrated(0.1, 600, 2));
    let run = |sub: &str| {
        let out = dir.path().join(sub);
        let o = rsv(&["estimate", "--data", &data, "--bootstrap", "30", "--out", out.to_str().unwrap()]);
        assert!(o.status.success(), "{}", stderr(&o));
        (std::fs::read(out.join("estimate.json")).unwrap(), std::fs::read(out.join("estimate.csv")).unwrap())
    };
    let (a, b) = (run("a"), run("b"));
    let strip = |bytes: &[u8]| String::from_utf8_lossy(bytes).replace(dir.path().join("a").to_str().unwrap(), "").replace(dir.path().join("b").to_str().unwrap(), "");
    assert_eq!(strip(&a.0), strip(&b.0));
    assert_eq!(strip(&a.1), strip(&b.1));
}

#[test]
fn irrelevant_rsv_exits_three() {
    let dir = tempfile::tempdir().unwrap();
    let mut units = Vec::new();
    for i in 0..200 {
        units.push(UnitRecord::exp((i % 2) as u8, vec![0.5]));
        units.push(UnitRecord::obs(i % 3 % 2, vec![0.5]));
    }
    let path = dir.path().join("flat.csv");
    write_csv(&Dataset::new(units, 2, Mode::Incomplete), &path).unwrap();
    let o = rsv(&["estimate", "--data", path.to_str().unwrap(), "--inference", "none", "--out", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
    assert!(stderr(&o).starts_with("IrrelevantRSV"), "{}", stderr(&o));
}

#[test]
fn malformed_data_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.csv");
    std::fs::write(&path, "sample,treatment,outcome,r_1\nEXP,7,,0.1\n").unwrap();
    let o = rsv(&["estimate", "--data", path.to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    assert!(stderr(&o).starts_with("MalformedRow"), "{}", stderr(&o));
}

#[test]
fn binned_outcome_reports_bound() {
    let dir = tempfile::tempdir().unwrap();
    let g = gen_calibrated(&DgpSpec::calibrated(0.2, 800, 5)).unwrap();
    let path = dir.path().join("real.csv");
    write_csv(&g.data, &path).unwrap();
    // Outcomes 0/1 read as reals and binned at radius 0.25 keep two bins.
    let o = rsv(&["estimate", "--data", path.to_str().unwrap(), "--bin-epsilon", "0.25", "--bin-range", "0,1", "--inference", "none", "--out", dir.path().to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let r = &json(dir.path().join("estimate.json"))["result"];
    assert_eq!(r["discretization_bias_bound"].as_f64(), Some(0.5));
    assert_eq!(r["value_map"].as_array().unwrap().len(), 2);
}

#[test]
fn simulate_orders_rows_and_summarizes() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let o = rsv(&["simulate", "--reps", "3", "--n-grid", "600,400", "--tau-grid", "0.2,0", "--methods", "benchmark,ours,common", "--out", out]);
    assert!(o.status.success(), "{}", stderr(&o));
    let results = std::fs::read_to_string(dir.path().join("mc_results.csv")).unwrap();
    let rows: Vec<Vec<String>> = results.lines().skip(2).map(|l| l.split(',').map(String::from).collect()).collect();
    assert_eq!(rows.len(), 3 * 2 * 2 * 3);
    assert_eq!(rows[0][0], "ours");
    assert_eq!(rows[12][0], "common");
    assert_eq!(rows[24][0], "benchmark");
    assert_eq!((rows[0][2].as_str(), rows[3][2].as_str()), ("600", "400"));
    assert!(rows.iter().all(|r| r[9] == "ok"));
    let summary = std::fs::read_to_string(dir.path().join("mc_summary.csv")).unwrap();
    assert_eq!(summary.lines().nth(1), Some("method,tau,n,reps_ok,reps_failed,truth,bias,sd,rmse,coverage"));
    assert_eq!(summary.lines().count(), 2 + 12);
}

#[test]
fn simulate_rejects_bad_spec() {
    let dir = tempfile::tempdir().unwrap();
    let o = rsv(&["simulate", "--reps", "2", "--tau-grid", "0.9", "--n-grid", "100", "--out", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).starts_with("InvalidSpec"));
}

#[test]
fn diagnose_relevance_on_strong_signal() {
    let dir = tempfile::tempdir().unwrap();
    let data = calibrated_csv(dir.path(), DgpSpec::calibrated(0.3, 1500, 4));
    let o = rsv(&["diagnose", "--data", &data, "--check", "relevance", "--bootstrap", "60", "--out", dir.path().to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let r = &json(dir.path().join("diagnostics.json"))["result"]["relevance"];
    assert_eq!(r["weak"], false);
    assert!(r["ci_low"].as_f64().unwrap() > 0.0 || r["ci_high"].as_f64().unwrap() < 0.0);
}

#[test]
fn diagnose_specification_reports_p_value() {
    let dir = tempfile::tempdir().unwrap();
    let data = calibrated_csv(dir.path(), DgpSpec::calibrated(0.2, 1000, 6));
    let o = rsv(&["diagnose", "--data", &data, "--check", "specification", "--bootstrap", "40", "--out", dir.path().to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let p = json(dir.path().join("diagnostics.json"))["result"]["spec_test"]["p_value"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&p));
}

#[test]
fn stability_without_overlap_warns_and_succeeds() {
    let dir = tempfile::tempdir().unwrap();
    let data = calibrated_csv(dir.path(), DgpSpec::calibrated(0.2, 400, 7));
    let o = rsv(&["diagnose", "--data", &data, "--check", "stability", "--out", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(stderr(&o).contains("InsufficientCell"));
    let csv = std::fs::read_to_string(dir.path().join("stability.csv")).unwrap();
    assert_eq!(csv.lines().nth(1), Some("cell,grid_point,density"));
}

#[test]
fn stability_with_overlap_exports_curves() {
    let dir = tempfile::tempdir().unwrap();
    let spec = DgpSpec {
        obs_fraction: 0.5,
        ..DgpSpec::calibrated(0.2, 1200, 8)
    };
    let data = calibrated_csv(dir.path(), spec);
    let o = rsv(&["diagnose", "--data", &data, "--check", "stability", "--out", dir.path().to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let v = json(dir.path().join("diagnostics.json"));
    let gaps = v["result"]["stability"]["gaps"].as_array().unwrap();
    assert_eq!(gaps.len(), 2);
}
