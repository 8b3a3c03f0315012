//! Controller/plant co-simulation.
//!
//! Three nested rates: the plant integrates every `dt`, the controller
//! samples every `ts`, and the MPPT updates its reference every MPPT
//! period. Events take effect at the first plant step whose time is at or
//! past the event time.

use thiserror::Error;

use crate::baseline::{pi_step, spwm_gates, PiInputs, PiState, Topology};
use crate::circuit::{self, grid_voltage, CircuitError, CircuitState, OperationMode, SwitchVector};
use crate::metrics::{self, Metrics, MetricsContext};
use crate::mpc::{select_mode, MpcState};
use crate::mppt::MpptState;
use crate::scenario::{ControllerKind, EventKind, Scenario, ScenarioError};
use crate::trace::TraceRecord;

#[derive(Debug, Error)]
pub enum EngineError {
    #[error(transparent)]
    Invalid(#[from] ScenarioError),
    #[error("{error} ({} trace records before the failure)", trace.len())]
    Integration {
        error: CircuitError,
        trace: Vec<TraceRecord>,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunOutput {
    pub trace: Vec<TraceRecord>,
    pub metrics: Metrics,
}

enum Controller {
    Mpc {
        state: MpcState,
        gates: SwitchVector,
    },
    Pi {
        state: PiState,
        topology: Topology,
        m: f64,
    },
}

impl Controller {
    fn new(kind: ControllerKind, ts: f64) -> Self {
        match kind {
            ControllerKind::MpcH5 => Controller::Mpc {
                state: MpcState::new(ts),
                gates: OperationMode::Mode2.gates(),
            },
            ControllerKind::PiH5 | ControllerKind::PiFullBridge => Controller::Pi {
                state: PiState::default(),
                topology: kind.topology(),
                m: 0.0,
            },
        }
    }
}

/// Running mean of controller-rate samples between MPPT updates.
#[derive(Default)]
struct Accumulator {
    v: f64,
    i: f64,
    n: usize,
}

impl Accumulator {
    fn push(&mut self, v: f64, i: f64) {
        self.v += v;
        self.i += i;
        self.n += 1;
    }

    fn take(&mut self) -> Option<(f64, f64)> {
        let out = (self.n > 0).then(|| (self.v / self.n as f64, self.i / self.n as f64));
        *self = Accumulator::default();
        out
    }
}

pub fn run(scenario: &Scenario) -> Result<RunOutput, EngineError> {
    scenario.validate()?;
    let (ctrl_every, mppt_every, carrier_steps) = scenario.step_ratios()?;
    let dt = scenario.sim.dt;
    let n_steps = (scenario.duration / dt + 1e-9).floor() as usize;
    let decimation = scenario.sim.trace_decimation;
    let params = &scenario.circuit;
    let envelope = 2.0 * scenario.pv.voc_stc;

    let mut ambient = scenario.initial_ambient;
    let mut array = scenario.pv.at(ambient);
    let mut fault = false;
    let mut next_event = 0;

    let mut trace = Vec::with_capacity(n_steps / decimation + 1);
    let fail = |error: CircuitError, trace: Vec<TraceRecord>| EngineError::Integration { error, trace };

    let mut state = CircuitState::new(scenario.mppt.v_init);
    let i_init = match array.current(state.v_pv) {
        Ok(i) => i,
        Err(e) => return Err(fail(e.into(), trace)),
    };
    let mut mppt = MpptState::new(
        scenario.mppt.config,
        scenario.mppt.v_init,
        state.v_pv,
        i_init,
    );
    let mut samples = Accumulator::default();
    let mut controller = Controller::new(scenario.controller, scenario.sim.ts);

    for k in 0..n_steps {
        let t = k as f64 * dt;
        state.t = t;

        while let Some(ev) = scenario.events.get(next_event) {
            if ev.time > t {
                break;
            }
            match ev.kind {
                EventKind::SetIrradiance(g) => {
                    ambient.irradiance = g;
                    array = scenario.pv.at(ambient);
                }
                EventKind::SetTemperature(temp) => {
                    ambient.temperature = temp;
                    array = scenario.pv.at(ambient);
                }
                EventKind::FaultOn => fault = true,
                EventKind::FaultOff => fault = false,
            }
            next_event += 1;
        }

        let v_grid = grid_voltage(params, t);

        if k % ctrl_every == 0 {
            let i_pv = match array.current(state.v_pv) {
                Ok(i) => i,
                Err(e) => return Err(fail(e.into(), trace)),
            };
            if k > 0 && k % mppt_every == 0 {
                if let Some((v_avg, i_avg)) = samples.take() {
                    let tracking = (v_avg - mppt.v_ref).abs() <= scenario.mppt.track_band * mppt.v_ref;
                    if !fault && tracking {
                        // Collapsed measurements are skipped; the reference holds.
                        if let Ok(next) = mppt.incond_update(v_avg, i_avg) {
                            mppt = next;
                        }
                    }
                }
            }
            samples.push(state.v_pv, i_pv);

            match &mut controller {
                Controller::Mpc { state: mpc, gates } => {
                    let sel = select_mode(
                        mpc,
                        mppt.v_ref,
                        state.v_pv,
                        i_pv,
                        state.i_l,
                        v_grid,
                        params.c_in,
                    );
                    *gates = sel.gates;
                }
                Controller::Pi { state: pi, m, .. } => {
                    let out = pi_step(
                        pi,
                        &scenario.pi,
                        &PiInputs {
                            v_ref: mppt.v_ref,
                            v_pv: state.v_pv,
                            i_l: state.i_l,
                            v_grid_now: v_grid,
                            v_grid_peak: params.v_grid_peak,
                        },
                        scenario.sim.ts,
                    );
                    *pi = out.state;
                    *m = out.m;
                }
            }
        }

        let (gates, modulation) = match &mut controller {
            Controller::Mpc { gates, .. } => (*gates, None),
            Controller::Pi { state: pi, topology, m } => {
                pi.carrier_phase = ((k % carrier_steps) as f64 + 0.5) / carrier_steps as f64;
                let out = spwm_gates(*m, pi.carrier_phase, *topology, v_grid >= 0.0);
                (out.gates, Some(*m))
            }
        };

        let (next, sample) = match circuit::step(&state, gates, &array, params, fault, dt) {
            Ok(x) => x,
            Err(e) => return Err(fail(e, trace)),
        };

        if k % decimation == 0 {
            trace.push(TraceRecord {
                t,
                v_pv: state.v_pv,
                i_pv: sample.i_pv,
                i_l: state.i_l,
                v_ref: mppt.v_ref,
                gates,
                modulation,
                i_leak: sample.i_leak,
                v_cm: sample.v_cm,
                fault,
            });
        }

        if next.v_pv.abs() > envelope {
            let error = CircuitError::Envelope {
                v_pv: next.v_pv,
                limit: envelope,
                t: next.t,
            };
            return Err(fail(error, trace));
        }
        state = next;
    }

    let metrics = metrics::compute(&trace, &MetricsContext::for_scenario(scenario));
    Ok(RunOutput { trace, metrics })
}
