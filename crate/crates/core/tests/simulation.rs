use std::io::BufReader;

use h5sim_core::circuit::{conduction, Conduction};
use h5sim_core::config;
use h5sim_core::metrics::{self, MetricsContext};
use h5sim_core::pv::{calibrate, count_local_maxima, mpp_oracle, AmbientCondition, CalibrationTargets};
use h5sim_core::scenario::{Event, EventKind};
use h5sim_core::trace::{read_csv, write_csv, TraceRecord};
use h5sim_core::{run, scenarios, ControllerKind, Scenario};

fn desk(kind: ControllerKind, duration: f64) -> Scenario {
    Scenario::desk(kind, duration).unwrap()
}

fn mean_var(xs: impl Iterator<Item = f64>) -> (f64, f64) {
    let v: Vec<f64> = xs.collect();
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    (m, v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n)
}

#[test]
fn identical_scenarios_give_identical_runs() {
    let s = config::load(scenarios::CASE3, &["sim.trace_decimation=5"]).unwrap();
    let a = run(&s).unwrap();
    let b = run(&s).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.trace.len(), 50_000);
}

#[test]
fn events_land_on_the_first_step_at_or_after_their_time() {
    let s = desk(ControllerKind::MpcH5, 0.05).with_events(vec![
        Event { time: 0.012_345, kind: EventKind::FaultOn },
        Event { time: 0.02, kind: EventKind::FaultOff },
    ]);
    let out = run(&s).unwrap();
    let first = out.trace.iter().find(|r| r.fault).unwrap();
    assert!((first.t - 0.012_35).abs() < 1e-12, "fault began at {}", first.t);
    let cleared = out.trace.iter().skip_while(|r| !r.fault).find(|r| !r.fault).unwrap();
    assert!((cleared.t - 0.02).abs() < 1e-12, "fault cleared at {}", cleared.t);
}

#[test]
fn metrics_recomputed_from_csv_match_the_engine() {
    let s = config::load::<&str>(scenarios::CASE3, &[]).unwrap();
    let out = run(&s).unwrap();
    let mut buf = Vec::new();
    write_csv(&mut buf, &out.trace).unwrap();
    let back = read_csv(BufReader::new(buf.as_slice())).unwrap();
    assert_eq!(back.len(), out.trace.len());
    for (a, b) in back.iter().zip(&out.trace) {
        assert_eq!(a.t.to_bits(), b.t.to_bits());
        assert_eq!(a.v_pv.to_bits(), b.v_pv.to_bits());
        assert_eq!(a.i_leak.to_bits(), b.i_leak.to_bits());
        assert_eq!(a.gates, b.gates);
        assert_eq!(a.fault, b.fault);
    }
    let again = metrics::compute(&back, &MetricsContext::for_scenario(&s));
    assert_eq!(again, out.metrics);
    assert!(out.metrics.fault_recovery_time.is_some());
}

/// Integrate the Ci charge balance over `trace`, starting from its first
/// `v_pv`; the result is the voltage one step past the last record.
fn integrate_ci(s: &Scenario, trace: &[TraceRecord]) -> f64 {
    let dt = s.sim.dt;
    let mut v = trace[0].v_pv;
    for r in trace {
        let i_out = match conduction(r.gates) {
            Conduction::Drive { polarity } => polarity * r.i_l,
            Conduction::Freewheel { .. } => 0.0,
        };
        let i_fault = if r.fault { r.v_pv / s.circuit.r_fault } else { 0.0 };
        v += dt * (r.i_pv - i_out - i_fault) / s.circuit.c_in;
    }
    v
}

#[test]
fn input_capacitor_charge_is_conserved() {
    for kind in [ControllerKind::MpcH5, ControllerKind::PiH5, ControllerKind::PiFullBridge] {
        let s = config::load::<&str>(scenarios::CASE3, &[]).unwrap().with_controller(kind);
        let out = run(&s).unwrap();
        let n = out.trace.len();
        let predicted = integrate_ci(&s, &out.trace[..n - 1]);
        let actual = out.trace[n - 1].v_pv;
        assert!(
            (predicted - actual).abs() < 1e-6 * actual.abs().max(1.0),
            "{kind}: integrated {predicted} vs logged {actual}"
        );
    }
}

#[test]
fn no_shoot_through_in_any_trace() {
    for kind in [ControllerKind::MpcH5, ControllerKind::PiH5, ControllerKind::PiFullBridge] {
        let out = run(&desk(kind, 0.2)).unwrap();
        assert!(out.trace.iter().all(|r| r.gates.is_valid()), "{kind}");
    }
}

#[test]
fn pv_curves_are_unimodal_and_ordered_by_irradiance() {
    let params = calibrate(&CalibrationTargets::desk_scale()).unwrap();
    let mut last_pmax = 0.0;
    for g in [100.0, 200.0, 400.0, 600.0, 800.0, 1000.0, 1100.0] {
        let amb = AmbientCondition::new(g, 25.0).unwrap();
        assert_eq!(count_local_maxima(&params, amb).unwrap(), 1, "G={g}");
        let mpp = mpp_oracle(&params, amb).unwrap();
        assert!(mpp.pmax > last_pmax, "G={g}");
        last_pmax = mpp.pmax;
        let array = params.at(amb);
        for k in 0..=200 {
            let v = mpp.voc * k as f64 / 200.0;
            let i = array.current(v).unwrap();
            assert!(array.relative_residual(v, i) < 1e-8, "G={g} v={v}");
        }
    }
}

#[test]
fn h5_common_mode_is_quieter_than_full_bridge() {
    let s = desk(ControllerKind::MpcH5, 0.3);
    let h5 = run(&s).unwrap();
    let fb = run(&s.clone().with_controller(ControllerKind::PiFullBridge)).unwrap();
    let tail = |t: &[TraceRecord]| t[t.len() / 2..].iter().map(|r| r.v_cm).collect::<Vec<_>>();
    let (_, var_h5) = mean_var(tail(&h5.trace).into_iter());
    let (_, var_fb) = mean_var(tail(&fb.trace).into_iter());
    assert!(var_h5 < var_fb, "MPC-H5 {var_h5} vs full bridge {var_fb}");
}

#[test]
fn mpc_switches_less_than_pi_h5_on_the_irradiance_profile() {
    let s = config::load::<&str>(scenarios::CASE1, &[]).unwrap();
    let mpc = run(&s).unwrap();
    let pi = run(&s.clone().with_controller(ControllerKind::PiH5)).unwrap();
    let a = mpc.metrics.switch_transitions_per_cycle.unwrap();
    let b = pi.metrics.switch_transitions_per_cycle.unwrap();
    assert!(a < b, "MPC {a} vs PI-H5 {b}");
}
