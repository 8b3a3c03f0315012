//! Scenario description: controller choice, plant and controller parameters,
//! and the timed event schedule.

use std::fmt;
use std::str::FromStr;

use thiserror::Error;

use crate::baseline::{PiParams, Topology};
use crate::circuit::CircuitParams;
use crate::mppt::MpptConfig;
use crate::pv::{calibrate, AmbientCondition, CalibrationError, CalibrationTargets, PvModelParams};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ControllerKind {
    MpcH5,
    PiH5,
    PiFullBridge,
}

impl ControllerKind {
    pub const ALL: [ControllerKind; 3] = [
        ControllerKind::MpcH5,
        ControllerKind::PiH5,
        ControllerKind::PiFullBridge,
    ];

    pub fn key(self) -> &'static str {
        match self {
            ControllerKind::MpcH5 => "mpc_h5",
            ControllerKind::PiH5 => "pi_h5",
            ControllerKind::PiFullBridge => "pi_full_bridge",
        }
    }

    pub fn topology(self) -> Topology {
        match self {
            ControllerKind::MpcH5 | ControllerKind::PiH5 => Topology::H5,
            ControllerKind::PiFullBridge => Topology::FullBridge,
        }
    }
}

impl fmt::Display for ControllerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ControllerKind::MpcH5 => "MPC_H5",
            ControllerKind::PiH5 => "PI_H5",
            ControllerKind::PiFullBridge => "PI_FullBridge",
        })
    }
}

impl FromStr for ControllerKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "mpc_h5" => Ok(ControllerKind::MpcH5),
            "pi_h5" => Ok(ControllerKind::PiH5),
            "pi_full_bridge" | "pi_fullbridge" => Ok(ControllerKind::PiFullBridge),
            other => Err(format!(
                "unknown controller '{other}' (expected mpc_h5, pi_h5 or pi_full_bridge)"
            )),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum EventKind {
    SetIrradiance(f64),
    SetTemperature(f64),
    FaultOn,
    FaultOff,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Event {
    pub time: f64,
    pub kind: EventKind,
}

/// Integration and logging step sizes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimSettings {
    /// Plant step.
    pub dt: f64,
    /// Controller sampling period.
    pub ts: f64,
    /// One trace record every this many plant steps.
    pub trace_decimation: usize,
}

impl Default for SimSettings {
    fn default() -> Self {
        SimSettings {
            dt: 1e-5,
            ts: 1e-4,
            trace_decimation: 1,
        }
    }
}

/// Post-processing settings.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricsSettings {
    /// Sliding RMS window in seconds; `None` means one grid period.
    pub rms_window: Option<f64>,
    /// Grid periods at the end of the run treated as steady state.
    pub steady_cycles: f64,
    pub recovery_tolerance: f64,
    pub recovery_hold: f64,
    /// Trailing-mean window in seconds for band checks; `None` means one
    /// grid period, `Some(0.0)` checks raw samples.
    pub band_window: Option<f64>,
}

impl Default for MetricsSettings {
    fn default() -> Self {
        MetricsSettings {
            rms_window: None,
            steady_cycles: 10.0,
            recovery_tolerance: 0.02,
            recovery_hold: 0.05,
            band_window: None,
        }
    }
}

/// MPPT settings plus the engine-side start and gating values.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MpptSettings {
    pub config: MpptConfig,
    /// Initial reference and initial PV voltage.
    pub v_init: f64,
    /// Updates are skipped while `|v_pv - v_ref| > track_band·v_ref`.
    pub track_band: f64,
}

impl MpptSettings {
    pub fn for_array(pv: &PvModelParams) -> Self {
        MpptSettings {
            config: MpptConfig::for_array(pv.voc_stc),
            v_init: 0.9 * pv.voc_stc,
            track_band: 0.05,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub duration: f64,
    pub controller: ControllerKind,
    pub events: Vec<Event>,
    pub seed: u64,
    pub initial_ambient: AmbientCondition,
    pub circuit: CircuitParams,
    pub pv: PvModelParams,
    pub mppt: MpptSettings,
    pub pi: PiParams,
    pub sim: SimSettings,
    pub metrics: MetricsSettings,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ScenarioError {
    #[error("invalid event schedule: {}", .0.join("; "))]
    Events(Vec<String>),
    #[error("invalid scenario: {0}")]
    Invalid(String),
    #[error(transparent)]
    Calibration(#[from] CalibrationError),
}

impl Scenario {
    /// Desk-scale array and default plant with every default filled in.
    pub fn desk(controller: ControllerKind, duration: f64) -> Result<Self, ScenarioError> {
        let pv = calibrate(&CalibrationTargets::desk_scale())?;
        Ok(Self::with_pv(controller, duration, pv, CircuitParams::default()))
    }

    pub fn with_pv(
        controller: ControllerKind,
        duration: f64,
        pv: PvModelParams,
        circuit: CircuitParams,
    ) -> Self {
        Scenario {
            duration,
            controller,
            events: Vec::new(),
            seed: 0,
            initial_ambient: AmbientCondition::STC,
            pi: PiParams::for_rating(pv.vmpp_stc * pv.impp_stc, circuit.v_grid_peak, pv.voc_stc),
            mppt: MpptSettings::for_array(&pv),
            circuit,
            pv,
            sim: SimSettings::default(),
            metrics: MetricsSettings::default(),
        }
    }

    pub fn with_events(mut self, events: Vec<Event>) -> Self {
        self.events = events;
        self
    }

    pub fn with_controller(mut self, controller: ControllerKind) -> Self {
        self.controller = controller;
        self
    }

    /// Plant steps per controller period, MPPT period and carrier period.
    pub fn step_ratios(&self) -> Result<(usize, usize, usize), ScenarioError> {
        let ratio = |num: f64, den: f64, what: &str| -> Result<usize, ScenarioError> {
            let r = num / den;
            let n = r.round();
            if n < 1.0 || (r - n).abs() > 1e-6 * n {
                return Err(ScenarioError::Invalid(format!(
                    "{what} ({num} s) must be a whole multiple of {den} s"
                )));
            }
            Ok(n as usize)
        };
        let ctrl = ratio(self.sim.ts, self.sim.dt, "sampling period")?;
        let mppt = ratio(self.mppt.config.period, self.sim.dt, "MPPT period")?;
        let carrier = ratio(1.0 / self.pi.carrier_freq, self.sim.dt, "carrier period")?;
        Ok((ctrl, mppt, carrier))
    }

    /// Ordering, range and value problems in the event list, each tagged
    /// with the index of the offending event.
    pub fn event_problems(&self) -> Vec<(usize, String)> {
        let mut problems = Vec::new();
        let mut prev: Option<f64> = None;
        for (idx, ev) in self.events.iter().enumerate() {
            let n = idx + 1;
            if !(0.0..=self.duration).contains(&ev.time) {
                problems.push((
                    idx,
                    format!("event #{n} at t = {} lies outside [0, {}]", ev.time, self.duration),
                ));
            }
            if let Some(p) = prev {
                if ev.time <= p {
                    problems.push((
                        idx,
                        format!("event #{n} at t = {} does not come after t = {p}", ev.time),
                    ));
                }
            }
            match ev.kind {
                EventKind::SetIrradiance(g) if !(g >= 0.0) => {
                    problems.push((idx, format!("event #{n}: irradiance {g} is negative")))
                }
                EventKind::SetTemperature(t) if !(-40.0..=90.0).contains(&t) => {
                    problems.push((idx, format!("event #{n}: temperature {t} outside [-40, 90]")))
                }
                _ => {}
            }
            prev = Some(ev.time);
        }
        problems
    }

    pub fn validate(&self) -> Result<(), ScenarioError> {
        let invalid = |msg: String| Err(ScenarioError::Invalid(msg));
        if !(self.duration >= 0.0) || !self.duration.is_finite() {
            return invalid(format!("duration must be >= 0, got {}", self.duration));
        }
        if !(self.sim.dt > 0.0) || !(self.sim.ts >= self.sim.dt) {
            return invalid(format!(
                "need 0 < dt ({}) <= ts ({})",
                self.sim.dt, self.sim.ts
            ));
        }
        if self.sim.trace_decimation == 0 {
            return invalid("trace_decimation must be at least 1".into());
        }
        self.circuit
            .validate()
            .map_err(|e| ScenarioError::Invalid(e.to_string()))?;
        self.pv
            .validate()
            .map_err(|e| ScenarioError::Invalid(e.to_string()))?;
        self.initial_ambient
            .validate()
            .map_err(|e| ScenarioError::Invalid(e.to_string()))?;
        self.mppt
            .config
            .validate(self.sim.ts)
            .map_err(ScenarioError::Invalid)?;
        if !(self.mppt.v_init > 0.0) {
            return invalid(format!("mppt v_init must be positive, got {}", self.mppt.v_init));
        }
        self.pi
            .validate(self.circuit.f_grid)
            .map_err(ScenarioError::Invalid)?;
        if let Some(w) = self.metrics.rms_window {
            if !(w >= self.circuit.grid_period() * (1.0 - 1e-9)) {
                return invalid(format!(
                    "rms_window {w} s is shorter than one grid period"
                ));
            }
        }
        if !(self.metrics.steady_cycles > 0.0)
            || !(self.metrics.recovery_tolerance > 0.0)
            || !(self.metrics.recovery_hold >= 0.0)
            || !(self.metrics.band_window.unwrap_or(0.0) >= 0.0)
        {
            return invalid("metrics settings must be positive".into());
        }
        self.step_ratios()?;

        let problems: Vec<String> = self.event_problems().into_iter().map(|(_, m)| m).collect();
        if problems.is_empty() {
            Ok(())
        } else {
            Err(ScenarioError::Events(problems))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn controller_names_round_trip() {
        for c in ControllerKind::ALL {
            assert_eq!(c.key().parse::<ControllerKind>().unwrap(), c);
        }
        assert!("pid".parse::<ControllerKind>().is_err());
    }

    #[test]
    fn default_scenario_is_valid() {
        let s = Scenario::desk(ControllerKind::MpcH5, 1.0).unwrap();
        s.validate().unwrap();
        assert_eq!(s.step_ratios().unwrap(), (10, 100, 10));
    }

    #[test]
    fn event_ordering_is_enforced() {
        let s = Scenario::desk(ControllerKind::MpcH5, 1.0)
            .unwrap()
            .with_events(vec![
                Event {
                    time: 0.5,
                    kind: EventKind::FaultOn,
                },
                Event {
                    time: 0.5,
                    kind: EventKind::FaultOff,
                },
                Event {
                    time: 2.0,
                    kind: EventKind::SetIrradiance(500.0),
                },
            ]);
        match s.validate() {
            Err(ScenarioError::Events(list)) => {
                assert_eq!(list.len(), 2, "{list:?}");
                assert!(list[0].contains("#2"));
                assert!(list[1].contains("#3"));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn non_integer_step_ratio_rejected() {
        let mut s = Scenario::desk(ControllerKind::PiH5, 1.0).unwrap();
        s.sim.ts = 1.5e-5;
        assert!(s.validate().is_err());
    }
}
