//! Metrics derived from a trace. Everything here is a function of the trace
//! and a [`MetricsContext`], so recomputing from an exported CSV gives the
//! same numbers the engine reported.

use thiserror::Error;

use crate::scenario::Scenario;
use crate::trace::TraceRecord;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error("trace contains no cleared fault")]
    NoFault,
}

/// Sampling and post-processing constants for one trace.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricsContext {
    /// Spacing of trace records in seconds.
    pub sample_dt: f64,
    pub grid_period: f64,
    pub rms_window: f64,
    pub steady_cycles: f64,
    pub recovery_tolerance: f64,
    pub recovery_hold: f64,
    /// Trailing-mean window in seconds applied to `v_pv` and `v_ref` before
    /// band checks; zero checks raw samples.
    pub band_window: f64,
}

impl MetricsContext {
    pub fn for_scenario(s: &Scenario) -> Self {
        let grid_period = s.circuit.grid_period();
        MetricsContext {
            sample_dt: s.sim.dt * s.sim.trace_decimation as f64,
            grid_period,
            rms_window: s.metrics.rms_window.unwrap_or(grid_period),
            steady_cycles: s.metrics.steady_cycles,
            recovery_tolerance: s.metrics.recovery_tolerance,
            recovery_hold: s.metrics.recovery_hold,
            band_window: s.metrics.band_window.unwrap_or(grid_period),
        }
    }

    pub fn samples(&self, seconds: f64) -> usize {
        (seconds / self.sample_dt).round() as usize
    }

    /// Band-check window in records, at least one.
    pub fn band_samples(&self) -> usize {
        self.samples(self.band_window).max(1)
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Metrics {
    /// Sliding-window RMS of the leakage current; element `k` covers
    /// records `k .. k + window`.
    pub leak_rms_series: Vec<f64>,
    /// Leakage RMS over the final `steady_cycles` grid periods.
    pub leak_rms: Option<f64>,
    /// Mean `|v_pv - v_ref| / v_ref` over the same steady window.
    pub vpv_tracking_err: Option<f64>,
    pub switch_transitions_per_cycle: Option<f64>,
    /// Seconds from fault clearance until tracking resumes; `None` if the
    /// trace has no cleared fault or tracking never resumes.
    pub fault_recovery_time: Option<f64>,
}

/// Sliding root-mean-square over `window` consecutive samples.
///
/// Returns `series.len() - window + 1` values, or nothing when the window
/// is empty or longer than the series.
pub fn rms(series: &[f64], window: usize) -> Vec<f64> {
    if window == 0 || window > series.len() {
        return Vec::new();
    }
    let mut out = Vec::with_capacity(series.len() - window + 1);
    let mut acc: f64 = series[..window].iter().map(|x| x * x).sum();
    out.push((acc / window as f64).max(0.0).sqrt());
    for k in window..series.len() {
        acc += series[k] * series[k] - series[k - window] * series[k - window];
        // Re-anchor periodically so cancellation error cannot build up.
        if k % 8192 == 0 {
            acc = series[k + 1 - window..=k].iter().map(|x| x * x).sum();
        }
        out.push((acc / window as f64).max(0.0).sqrt());
    }
    out
}

/// Sliding RMS with the window given in seconds.
pub fn rms_seconds(series: &[f64], sample_dt: f64, window: f64) -> Vec<f64> {
    rms(series, (window / sample_dt).round() as usize)
}

/// Number of records whose gates differ from the previous record's.
pub fn switch_transitions(trace: &[TraceRecord]) -> usize {
    trace.windows(2).filter(|w| w[0].gates != w[1].gates).count()
}

/// Mean relative tracking error over records with `from <= t < to`.
pub fn tracking_error(trace: &[TraceRecord], from: f64, to: f64) -> Option<f64> {
    let (sum, n) = trace
        .iter()
        .filter(|r| r.t >= from && r.t < to)
        .fold((0.0, 0usize), |(s, n), r| {
            (s + (r.v_pv - r.v_ref).abs() / r.v_ref.abs(), n + 1)
        });
    (n > 0).then(|| sum / n as f64)
}

/// Relative deviation `|mean v_pv - mean v_ref| / mean v_ref` over the
/// trailing `window` records ending at each record. The first `window - 1`
/// records use whatever history exists.
pub fn band_error(trace: &[TraceRecord], window: usize) -> Vec<f64> {
    let window = window.max(1);
    let mut out = Vec::with_capacity(trace.len());
    let (mut sv, mut sr) = (0.0, 0.0);
    for (k, r) in trace.iter().enumerate() {
        sv += r.v_pv;
        sr += r.v_ref;
        if k >= window {
            sv -= trace[k - window].v_pv;
            sr -= trace[k - window].v_ref;
        }
        if k % 8192 == 0 {
            let lo = (k + 1).saturating_sub(window);
            sv = trace[lo..=k].iter().map(|r| r.v_pv).sum();
            sr = trace[lo..=k].iter().map(|r| r.v_ref).sum();
        }
        out.push((sv - sr).abs() / sr.abs());
    }
    out
}

/// Time from `from` until the band error stays within `tolerance` for
/// `hold` seconds.
pub fn settling_time(
    trace: &[TraceRecord],
    from: f64,
    tolerance: f64,
    hold: f64,
    window: usize,
) -> Option<f64> {
    let err = band_error(trace, window);
    let mut run_start: Option<f64> = None;
    for (r, e) in trace.iter().zip(err).filter(|(r, _)| r.t >= from) {
        if e <= tolerance {
            let start = *run_start.get_or_insert(r.t);
            if r.t - start >= hold - 1e-12 {
                return Some(start - from);
            }
        } else {
            run_start = None;
        }
    }
    None
}

/// Time of the last fault clearance in the trace.
pub fn fault_clear_time(trace: &[TraceRecord]) -> Option<f64> {
    trace
        .windows(2)
        .rfind(|w| w[0].fault && !w[1].fault)
        .map(|w| w[1].t)
}

/// Recovery after the last fault clearance; errors if no fault was cleared.
pub fn fault_recovery_time(
    trace: &[TraceRecord],
    tolerance: f64,
    hold: f64,
    window: usize,
) -> Result<Option<f64>, MetricsError> {
    let cleared = fault_clear_time(trace).ok_or(MetricsError::NoFault)?;
    Ok(settling_time(trace, cleared, tolerance, hold, window))
}

pub fn compute(trace: &[TraceRecord], ctx: &MetricsContext) -> Metrics {
    let leak: Vec<f64> = trace.iter().map(|r| r.i_leak).collect();
    let window = ctx.samples(ctx.rms_window);
    let leak_rms_series = rms(&leak, window);

    let steady = ctx.samples(ctx.steady_cycles * ctx.grid_period).min(trace.len());
    let (leak_rms, vpv_tracking_err) = if trace.is_empty() || leak_rms_series.is_empty() {
        (None, None)
    } else {
        let tail = &trace[trace.len() - steady..];
        let ms = tail.iter().map(|r| r.i_leak * r.i_leak).sum::<f64>() / tail.len() as f64;
        let err = tail
            .iter()
            .map(|r| (r.v_pv - r.v_ref).abs() / r.v_ref.abs())
            .sum::<f64>()
            / tail.len() as f64;
        (Some(ms.sqrt()), Some(err))
    };

    let switch_transitions_per_cycle = (!trace.is_empty()).then(|| {
        let cycles = trace.len() as f64 * ctx.sample_dt / ctx.grid_period;
        switch_transitions(trace) as f64 / cycles
    });

    let fault_recovery_time =
        fault_recovery_time(trace, ctx.recovery_tolerance, ctx.recovery_hold, ctx.band_samples())
            .ok()
            .flatten();

    Metrics {
        leak_rms_series,
        leak_rms,
        vpv_tracking_err,
        switch_transitions_per_cycle,
        fault_recovery_time,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::circuit::OperationMode;
    use proptest::prelude::*;
    use std::f64::consts::PI;

    fn brute_rms(series: &[f64], w: usize) -> Vec<f64> {
        (0..=series.len().saturating_sub(w))
            .filter(|_| w > 0 && w <= series.len())
            .map(|k| (series[k..k + w].iter().map(|x| x * x).sum::<f64>() / w as f64).sqrt())
            .collect()
    }

    fn record(t: f64, v_pv: f64, v_ref: f64, fault: bool) -> TraceRecord {
        TraceRecord {
            t,
            v_pv,
            i_pv: 0.0,
            i_l: 0.0,
            v_ref,
            gates: OperationMode::Mode2.gates(),
            modulation: None,
            i_leak: 0.0,
            v_cm: 0.0,
            fault,
        }
    }

    #[test]
    fn rms_of_constant() {
        let out = rms(&[3.0; 50], 10);
        assert_eq!(out.len(), 41);
        assert!(out.iter().all(|&x| (x - 3.0).abs() < 1e-12));
    }

    #[test]
    fn rms_of_sinusoid() {
        let n = 1667;
        let a = 2.5;
        let s: Vec<f64> = (0..3 * n)
            .map(|k| a * (2.0 * PI * k as f64 / n as f64).sin())
            .collect();
        for x in rms(&s, n) {
            assert!((x - a / 2f64.sqrt()).abs() / (a / 2f64.sqrt()) < 1e-3);
        }
    }

    #[test]
    fn window_longer_than_series() {
        assert!(rms(&[1.0, 2.0], 3).is_empty());
        assert!(rms(&[], 1).is_empty());
    }

    proptest! {
        #[test]
        fn sliding_matches_brute_force(
            s in prop::collection::vec(-50.0f64..50.0, 1..20_000),
            w in 1usize..3000,
        ) {
            let fast = rms(&s, w);
            let slow = brute_rms(&s, w);
            prop_assert_eq!(fast.len(), slow.len());
            // Running sums lose precision relative to the largest sample seen.
            let peak = s.iter().fold(0.0f64, |m, x| m.max(x * x));
            for (a, b) in fast.iter().zip(&slow) {
                prop_assert!((a * a - b * b).abs() <= 1e-10 * peak, "{} vs {}", a, b);
            }
        }
    }

    #[test]
    fn recovery_of_converged_trace_is_zero() {
        let trace: Vec<_> = (0..1000)
            .map(|k| record(k as f64 * 1e-3, 190.0, 190.0, (100..200).contains(&k)))
            .collect();
        assert_eq!(fault_recovery_time(&trace, 0.02, 0.05, 1).unwrap(), Some(0.0));
    }

    #[test]
    fn recovery_absent_when_never_back_in_band() {
        let trace: Vec<_> = (0..1000)
            .map(|k| record(k as f64 * 1e-3, 100.0, 190.0, (100..200).contains(&k)))
            .collect();
        assert_eq!(fault_recovery_time(&trace, 0.02, 0.05, 1).unwrap(), None);
    }

    #[test]
    fn recovery_requires_a_fault() {
        let trace: Vec<_> = (0..10).map(|k| record(k as f64, 1.0, 1.0, false)).collect();
        assert_eq!(fault_recovery_time(&trace, 0.02, 0.05, 1), Err(MetricsError::NoFault));
    }

    #[test]
    fn recovery_measures_time_to_sustained_band() {
        // Fault clears at 0.2 s; v_pv back in band from 0.35 s.
        let trace: Vec<_> = (0..1000)
            .map(|k| {
                let t = k as f64 * 1e-3;
                let v = if t < 0.35 { 150.0 } else { 190.0 };
                record(t, v, 190.0, (100..200).contains(&k))
            })
            .collect();
        let r = fault_recovery_time(&trace, 0.02, 0.05, 1).unwrap().unwrap();
        assert!((r - 0.15).abs() < 1e-9, "{r}");
        // 20-record trailing mean: 150 + 40·n/20 >= 0.98·190 first at n = 19.
        let r = fault_recovery_time(&trace, 0.02, 0.05, 20).unwrap().unwrap();
        assert!((r - 0.168).abs() < 1e-9, "{r}");
    }

    #[test]
    fn band_error_averages_ripple_away() {
        // +-5% square ripple around the reference, period 10 records.
        let trace: Vec<_> = (0..200)
            .map(|k| {
                let v = if (k / 5) % 2 == 0 { 199.5 } else { 180.5 };
                record(k as f64 * 1e-3, v, 190.0, false)
            })
            .collect();
        let raw = band_error(&trace, 1);
        assert!(raw.iter().all(|&e| (e - 0.05).abs() < 1e-12));
        let smooth = band_error(&trace, 10);
        assert!(smooth[9..].iter().all(|&e| e < 1e-12));
    }
}
