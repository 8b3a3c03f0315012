//! Conventional comparison controllers: a cascaded PI voltage/current loop
//! whose modulation index drives a triangular-carrier SPWM stage, for either
//! the H5 topology or a plain full bridge.

use crate::circuit::{OperationMode, SwitchVector};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Topology {
    H5,
    FullBridge,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PiParams {
    /// Outer loop, A per V of PV-voltage error.
    pub kp_v: f64,
    pub ki_v: f64,
    /// Inner loop, V per A of current error (normalised by `v_pv` into `m`).
    pub kp_i: f64,
    pub ki_i: f64,
    pub carrier_freq: f64,
    /// Clamp on the grid-current reference amplitude and on the outer integrator.
    pub i_ref_max: f64,
    /// Clamp on the inner integrator.
    pub v_int_max: f64,
}

impl PiParams {
    /// Shipped gains with clamps sized from the array rating and grid peak.
    pub fn for_rating(pmax: f64, v_grid_peak: f64, voc: f64) -> Self {
        PiParams {
            kp_v: 0.5,
            ki_v: 20.0,
            kp_i: 5.0,
            ki_i: 200.0,
            carrier_freq: 10e3,
            i_ref_max: 4.0 * pmax / v_grid_peak.max(1.0),
            v_int_max: voc,
        }
    }

    pub fn validate(&self, f_grid: f64) -> Result<(), String> {
        for (name, v) in [
            ("kp_v", self.kp_v),
            ("ki_v", self.ki_v),
            ("kp_i", self.kp_i),
            ("ki_i", self.ki_i),
            ("i_ref_max", self.i_ref_max),
            ("v_int_max", self.v_int_max),
        ] {
            if !(v > 0.0) {
                return Err(format!("{name} must be positive, got {v}"));
            }
        }
        if !(self.carrier_freq >= 20.0 * f_grid) {
            return Err(format!(
                "carrier_freq {} must be at least 20·f_grid = {}",
                self.carrier_freq,
                20.0 * f_grid
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct PiState {
    pub integ_v: f64,
    pub integ_i: f64,
    pub carrier_phase: f64,
}

/// Measurements for one PI update.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PiInputs {
    pub v_ref: f64,
    pub v_pv: f64,
    pub i_l: f64,
    pub v_grid_now: f64,
    pub v_grid_peak: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PiOutput {
    pub m: f64,
    pub i_ref: f64,
    pub state: PiState,
}

/// One update of the cascaded loop.
///
/// Outer: `A = kp_v·(v_pv - v_ref) + ∫`, so a PV voltage above its reference
/// raises the exported current. `i_ref = A·v_grid/v_grid_peak`.
/// Inner: `m = (kp_i·(i_ref - i_l) + ∫ + v_grid) / v_pv`, clamped to [-1, 1].
/// Integrators only accumulate while their output is unsaturated or the
/// error drives it back, and never leave their clamps.
pub fn pi_step(state: &PiState, params: &PiParams, inp: &PiInputs, ts: f64) -> PiOutput {
    if inp.v_pv <= 1.0 {
        return PiOutput {
            m: 0.0,
            i_ref: 0.0,
            state: *state,
        };
    }
    let mut next = *state;

    let e_v = inp.v_pv - inp.v_ref;
    let integ_v = (state.integ_v + params.ki_v * e_v * ts).clamp(-params.i_ref_max, params.i_ref_max);
    let amp_raw = params.kp_v * e_v + integ_v;
    if amp_raw.abs() <= params.i_ref_max || amp_raw.signum() != e_v.signum() {
        next.integ_v = integ_v;
    }
    let amp = (params.kp_v * e_v + next.integ_v).clamp(-params.i_ref_max, params.i_ref_max);
    let unit = if inp.v_grid_peak > 0.0 {
        inp.v_grid_now / inp.v_grid_peak
    } else {
        0.0
    };
    let i_ref = amp * unit;

    let e_i = i_ref - inp.i_l;
    let integ_i = (state.integ_i + params.ki_i * e_i * ts).clamp(-params.v_int_max, params.v_int_max);
    let m_raw = (params.kp_i * e_i + integ_i + inp.v_grid_now) / inp.v_pv;
    if m_raw.abs() <= 1.0 || m_raw.signum() != e_i.signum() {
        next.integ_i = integ_i;
    }
    let m = ((params.kp_i * e_i + next.integ_i + inp.v_grid_now) / inp.v_pv).clamp(-1.0, 1.0);
    PiOutput {
        m,
        i_ref,
        state: next,
    }
}

/// Triangular carrier in [0, 1]: 0 at phase 0, 1 at phase 0.5.
pub fn carrier(phase: f64) -> f64 {
    1.0 - (2.0 * phase - 1.0).abs()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Modulated {
    pub gates: SwitchVector,
    /// `|m| > 1` on input; the index was clamped.
    pub clamped: bool,
}

/// Carrier comparison for one instant of the carrier period.
///
/// H5: within the positive grid half-cycle the pattern is Mode 1 while
/// `m ≥ carrier` (and `m > 0`), else Mode 2; the negative half mirrors with
/// Modes 3/4 and `-m`. Full bridge: unipolar SPWM with leg A compared to `m`
/// and leg B to `-m` against a bipolar carrier, S5 held closed.
pub fn spwm_gates(m: f64, carrier_phase: f64, topology: Topology, grid_positive: bool) -> Modulated {
    let clamped = m.abs() > 1.0;
    let m = m.clamp(-1.0, 1.0);
    let c = carrier(carrier_phase);
    let gates = match topology {
        Topology::H5 => {
            let drive = if grid_positive { m } else { -m };
            let active = drive > 0.0 && drive >= c;
            OperationMode::for_class(active, grid_positive).gates()
        }
        Topology::FullBridge => {
            let bipolar = 2.0 * c - 1.0;
            let a_high = m >= bipolar;
            let b_high = -m >= bipolar;
            SwitchVector::new(a_high, !a_high, b_high, !b_high, true)
        }
    };
    Modulated { gates, clamped }
}
