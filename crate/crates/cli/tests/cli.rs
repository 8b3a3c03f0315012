use std::collections::HashMap;
use std::fs;
use std::io::BufReader;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use h5sim_core::metrics::{compute, MetricsContext};
use h5sim_core::pv::{calibrate, mpp_oracle, AmbientCondition, CalibrationTargets};
use h5sim_core::trace::read_csv;

fn scenario(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/scenarios").join(name)
}

fn h5sim(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_h5sim"))
        .args(args)
        .env_remove("H5SIM_OUT_DIR")
        .output()
        .unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn parse_metrics(text: &str) -> HashMap<String, String> {
    text.lines()
        .map(|l| {
            let (k, v) = l.split_once(": ").unwrap();
            (k.to_string(), v.to_string())
        })
        .collect()
}

fn num(m: &HashMap<String, String>, key: &str) -> Option<f64> {
    match m[key].as_str() {
        "none" => None,
        v => Some(v.parse().unwrap()),
    }
}

#[test]
fn run_writes_trace_metrics_and_plots_that_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let o = h5sim(&["run", scenario("case3.scenario").to_str().unwrap(), "--out", out, "--format", "csv+svg"]);
    assert!(o.status.success(), "{}", stderr(&o));
    for f in ["trace.csv", "metrics.txt", "pv.svg", "leakage.svg"] {
        assert!(dir.path().join(f).is_file(), "{f} missing");
    }
    let svg = fs::read_to_string(dir.path().join("pv.svg")).unwrap();
    assert!(svg.starts_with("<svg") && svg.contains("v_pv"));

    let m = parse_metrics(&fs::read_to_string(dir.path().join("metrics.txt")).unwrap());
    let file = fs::File::open(dir.path().join("trace.csv")).unwrap();
    let trace = read_csv(BufReader::new(file)).unwrap();
    assert_eq!(trace.len(), m["records"].parse::<usize>().unwrap());
    let ctx = MetricsContext {
        sample_dt: num(&m, "sample_dt").unwrap(),
        grid_period: num(&m, "grid_period").unwrap(),
        rms_window: num(&m, "rms_window").unwrap(),
        steady_cycles: num(&m, "steady_cycles").unwrap(),
        recovery_tolerance: num(&m, "recovery_tolerance").unwrap(),
        recovery_hold: num(&m, "recovery_hold").unwrap(),
        band_window: num(&m, "band_window").unwrap(),
    };
    let again = compute(&trace, &ctx);
    assert_eq!(again.leak_rms, num(&m, "leak_rms"));
    assert_eq!(again.vpv_tracking_err, num(&m, "vpv_tracking_err"));
    assert_eq!(again.switch_transitions_per_cycle, num(&m, "switch_transitions_per_cycle"));
    assert_eq!(again.fault_recovery_time, num(&m, "fault_recovery_time"));
    assert!(again.fault_recovery_time.is_some());
}

#[test]
fn override_changes_grid_frequency() {
    let dir = tempfile::tempdir().unwrap();
    let o = h5sim(&[
        "run",
        scenario("case2.scenario").to_str().unwrap(),
        "--out",
        dir.path().to_str().unwrap(),
        "--override",
        "circuit.f_grid=50",
        "--override",
        "scenario.duration=0.1",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let m = parse_metrics(&stdout(&o));
    assert_eq!(num(&m, "grid_period"), Some(0.02));
    assert_eq!(m["records"], "10000");
}

#[test]
fn output_directory_defaults_from_environment() {
    let dir = tempfile::tempdir().unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_h5sim"))
        .args(["run", scenario("case2.scenario").to_str().unwrap(), "--override", "scenario.duration=0.02"])
        .env("H5SIM_OUT_DIR", dir.path())
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(dir.path().join("trace.csv").is_file());
}

#[test]
fn config_errors_exit_2_with_position() {
    let dir = tempfile::tempdir().unwrap();
    let empty = dir.path().join("empty.scenario");
    fs::write(&empty, "[scenario]\ncontroller = mpc_h5\n").unwrap();
    let o = h5sim(&["run", empty.to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("duration"), "{}", stderr(&o));

    let bad = dir.path().join("bad.scenario");
    fs::write(&bad, "[scenario]\nduration = 1\n\n[circuit]\nc_in = fast\n").unwrap();
    let o = h5sim(&["run", bad.to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("line 5"), "{}", stderr(&o));

    let o = h5sim(&["run", bad.to_str().unwrap(), "--override", "sim.nope=1"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn missing_scenario_file_exits_1() {
    let o = h5sim(&["run", "/nonexistent/x.scenario"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn blow_up_exits_3_and_keeps_partial_trace() {
    let dir = tempfile::tempdir().unwrap();
    let o = h5sim(&[
        "run",
        scenario("case2.scenario").to_str().unwrap(),
        "--out",
        dir.path().to_str().unwrap(),
        "--override",
        "circuit.c_in=1e-9",
    ]);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
    assert!(dir.path().join("trace.csv").is_file());
}

#[test]
fn compare_reports_ordering_and_is_repeatable() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let path = scenario("case2.scenario");
    let a = h5sim(&["compare", path.to_str().unwrap(), "--out", out, "--format", "csv+svg"]);
    assert!(a.status.success(), "{}{}", stdout(&a), stderr(&a));
    let text = stdout(&a);
    for key in ["mpc_h5", "pi_h5", "pi_full_bridge", "holds"] {
        assert!(text.contains(key), "{text}");
    }
    assert!(dir.path().join("compare.csv").is_file());
    assert!(dir.path().join("leak_overlay.csv").is_file());
    assert!(dir.path().join("leak_overlay.svg").is_file());
    let b = h5sim(&["compare", path.to_str().unwrap(), "--out", out]);
    assert_eq!(stdout(&a), stdout(&b));
}

#[test]
fn compare_without_parasitic_capacitance_sees_no_leakage() {
    let dir = tempfile::tempdir().unwrap();
    let o = h5sim(&[
        "compare",
        scenario("case2.scenario").to_str().unwrap(),
        "--out",
        dir.path().to_str().unwrap(),
        "--override",
        "circuit.c_parasitic=0",
        "--override",
        "scenario.duration=0.3",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = fs::read_to_string(dir.path().join("compare.csv")).unwrap();
    for row in csv.lines().skip(1) {
        let leak: f64 = row.split(',').nth(1).unwrap().parse().unwrap();
        assert!(leak.abs() < 1e-9, "{row}");
    }
}

fn mppcurve(irradiance: &str, dir: &Path) -> Vec<(f64, f64, f64, bool)> {
    let o = h5sim(&["mppcurve", "--irradiance", irradiance, "--out", dir.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = fs::read_to_string(dir.join("mppcurve.csv")).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("v,i,p,mpp"));
    lines
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            (f[0].parse().unwrap(), f[1].parse().unwrap(), f[2].parse().unwrap(), f[3] == "1")
        })
        .collect()
}

#[test]
fn mppcurve_marks_the_oracle_maximum() {
    let dir = tempfile::tempdir().unwrap();
    let params = calibrate(&CalibrationTargets::desk_scale()).unwrap();
    let mut pmax = Vec::new();
    for g in ["600", "800", "1000"] {
        let rows = mppcurve(g, dir.path());
        let oracle = mpp_oracle(&params, AmbientCondition::new(g.parse().unwrap(), 25.0).unwrap()).unwrap();
        let best = rows.iter().max_by(|a, b| a.2.total_cmp(&b.2)).unwrap();
        assert!(best.3, "G={g}: max row not marked");
        assert_eq!(rows.iter().filter(|r| r.3).count(), 1);
        assert_eq!(best.0, oracle.vmpp);
        assert_eq!(best.2, oracle.pmax);
        assert!(rows.windows(2).all(|w| w[0].0 < w[1].0));
        pmax.push(best.2);
    }
    assert!(pmax[0] < pmax[1] && pmax[1] < pmax[2], "{pmax:?}");
}

#[test]
fn mppcurve_in_darkness_has_zero_current() {
    let dir = tempfile::tempdir().unwrap();
    let rows = mppcurve("0", dir.path());
    assert!(!rows.is_empty());
    assert!(rows.iter().all(|r| r.1 == 0.0));
}

#[test]
fn mppcurve_rejects_bad_ambient() {
    let o = h5sim(&["mppcurve", "--irradiance", "-5"]);
    assert_eq!(o.status.code(), Some(2));
}
