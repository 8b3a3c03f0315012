//! H5 / full-bridge switching network, DC link, output filter, grid source,
//! parasitic leakage loop and PV-terminal fault branch, advanced one forward
//! Euler step at a time.
//!
//! Switch naming: S1/S2 are the upper/lower devices of leg A, S3/S4 the
//! upper/lower devices of leg B, and S5 connects the upper bus to the PV
//! positive terminal. A full bridge is an H5 with S5 permanently closed.

use std::f64::consts::PI;
use std::fmt;

use thiserror::Error;

use crate::pv::PvError;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CircuitError {
    #[error("integration blow-up at t = {t} s: {field} is not finite")]
    BlowUp { field: &'static str, t: f64 },
    #[error("v_pv = {v_pv} V left the validity envelope of ±{limit} V at t = {t} s")]
    Envelope { v_pv: f64, limit: f64, t: f64 },
    #[error("shoot-through gate pattern {0}")]
    ShootThrough(SwitchVector),
    #[error("invalid circuit parameters: {0}")]
    InvalidParams(String),
    #[error(transparent)]
    Source(#[from] PvError),
}

/// Anything that supplies a terminal current as a function of terminal voltage.
pub trait CurrentSource {
    fn current(&self, v: f64) -> Result<f64, PvError>;
}

/// Ideal DC current source.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConstantCurrent(pub f64);

impl CurrentSource for ConstantCurrent {
    fn current(&self, _v: f64) -> Result<f64, PvError> {
        Ok(self.0)
    }
}

/// Current source with a parallel resistance: `i = current - v / resistance`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NortonSource {
    pub current: f64,
    pub resistance: f64,
}

impl CurrentSource for NortonSource {
    fn current(&self, v: f64) -> Result<f64, PvError> {
        Ok(self.current - v / self.resistance)
    }
}

/// Gate signals S1..S5.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub struct SwitchVector {
    pub s1: bool,
    pub s2: bool,
    pub s3: bool,
    pub s4: bool,
    pub s5: bool,
}

impl SwitchVector {
    pub const fn new(s1: bool, s2: bool, s3: bool, s4: bool, s5: bool) -> Self {
        SwitchVector { s1, s2, s3, s4, s5 }
    }

    pub fn bits(&self) -> [bool; 5] {
        [self.s1, self.s2, self.s3, self.s4, self.s5]
    }

    /// Neither leg may have both of its devices closed.
    pub fn validate(&self) -> Result<(), CircuitError> {
        if (self.s1 && self.s2) || (self.s3 && self.s4) {
            Err(CircuitError::ShootThrough(*self))
        } else {
            Ok(())
        }
    }

    pub fn is_valid(&self) -> bool {
        self.validate().is_ok()
    }

    /// Operation mode number if the pattern is one, else the five gate bits.
    pub fn label(&self) -> String {
        match OperationMode::from_gates(*self) {
            Some(mode) => mode.number().to_string(),
            None => self.to_string(),
        }
    }

    /// Inverse of [`SwitchVector::label`].
    pub fn parse_label(s: &str) -> Option<SwitchVector> {
        match s {
            "1" => Some(OperationMode::Mode1.gates()),
            "2" => Some(OperationMode::Mode2.gates()),
            "3" => Some(OperationMode::Mode3.gates()),
            "4" => Some(OperationMode::Mode4.gates()),
            _ if s.len() == 5 && s.bytes().all(|b| b == b'0' || b == b'1') => {
                let b: Vec<bool> = s.bytes().map(|b| b == b'1').collect();
                Some(SwitchVector::new(b[0], b[1], b[2], b[3], b[4]))
            }
            _ => None,
        }
    }
}

impl fmt::Display for SwitchVector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for b in self.bits() {
            f.write_str(if b { "1" } else { "0" })?;
        }
        Ok(())
    }
}

/// The four H5 switching states.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum OperationMode {
    /// Active, positive half cycle: S1, S4, S5.
    Mode1,
    /// Freewheeling, positive half cycle: S1.
    Mode2,
    /// Active, negative half cycle: S2, S3, S5.
    Mode3,
    /// Freewheeling, negative half cycle: S3.
    Mode4,
}

impl OperationMode {
    pub const ALL: [OperationMode; 4] = [
        OperationMode::Mode1,
        OperationMode::Mode2,
        OperationMode::Mode3,
        OperationMode::Mode4,
    ];

    pub const fn gates(self) -> SwitchVector {
        match self {
            OperationMode::Mode1 => SwitchVector::new(true, false, false, true, true),
            OperationMode::Mode2 => SwitchVector::new(true, false, false, false, false),
            OperationMode::Mode3 => SwitchVector::new(false, true, true, false, true),
            OperationMode::Mode4 => SwitchVector::new(false, false, true, false, false),
        }
    }

    pub fn from_gates(gates: SwitchVector) -> Option<OperationMode> {
        OperationMode::ALL.into_iter().find(|m| m.gates() == gates)
    }

    pub const fn number(self) -> u8 {
        match self {
            OperationMode::Mode1 => 1,
            OperationMode::Mode2 => 2,
            OperationMode::Mode3 => 3,
            OperationMode::Mode4 => 4,
        }
    }

    pub const fn is_active(self) -> bool {
        matches!(self, OperationMode::Mode1 | OperationMode::Mode3)
    }

    /// Mode of the given class (active or freewheeling) for a grid half cycle.
    pub const fn for_class(active: bool, positive_half: bool) -> OperationMode {
        match (active, positive_half) {
            (true, true) => OperationMode::Mode1,
            (false, true) => OperationMode::Mode2,
            (true, false) => OperationMode::Mode3,
            (false, false) => OperationMode::Mode4,
        }
    }
}

pub fn mode_to_gates(mode: OperationMode) -> SwitchVector {
    mode.gates()
}

/// Inverter output voltage `v_AB` for an operation mode.
pub fn terminal_voltage(mode: OperationMode, v_pv: f64) -> f64 {
    match mode {
        OperationMode::Mode1 => v_pv,
        OperationMode::Mode3 => -v_pv,
        OperationMode::Mode2 | OperationMode::Mode4 => 0.0,
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum LegPotential {
    UpperBus,
    NegativeRail,
    Undriven,
}

fn leg(upper: bool, lower: bool) -> LegPotential {
    if upper {
        LegPotential::UpperBus
    } else if lower {
        LegPotential::NegativeRail
    } else {
        LegPotential::Undriven
    }
}

/// Average of the two leg potentials relative to the DC negative rail.
///
/// With S5 open the upper bus floats; any pattern that ties a leg to it
/// holds the previous common-mode value.
pub fn common_mode_voltage(gates: SwitchVector, v_pv: f64, prev_vcm: f64) -> f64 {
    let upper_bus = gates.s5.then_some(v_pv);
    let potential = |p: LegPotential| match p {
        LegPotential::UpperBus => upper_bus,
        LegPotential::NegativeRail => Some(0.0),
        LegPotential::Undriven => None,
    };
    let a = leg(gates.s1, gates.s2);
    let b = leg(gates.s3, gates.s4);
    // An undriven leg is clamped by its diodes to whatever the other leg sits at.
    let (a, b) = match (a, b) {
        (LegPotential::Undriven, LegPotential::Undriven) => return prev_vcm,
        (LegPotential::Undriven, b) => (b, b),
        (a, LegPotential::Undriven) => (a, a),
        ab => ab,
    };
    match (potential(a), potential(b)) {
        (Some(va), Some(vb)) => 0.5 * (va + vb),
        _ => prev_vcm,
    }
}

/// How the network connects the DC link to the filter for a gate pattern.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Conduction {
    /// `v_AB = polarity·v_pv`, PV side carries `polarity·i_l`.
    Drive { polarity: f64 },
    /// `v_AB = 0`; the flags say which current directions have a path.
    Freewheel { forward: bool, reverse: bool },
}

pub fn conduction(gates: SwitchVector) -> Conduction {
    let SwitchVector { s1, s2, s3, s4, s5 } = gates;
    if s5 && s1 && s4 && !s2 && !s3 {
        Conduction::Drive { polarity: 1.0 }
    } else if s5 && s2 && s3 && !s1 && !s4 {
        Conduction::Drive { polarity: -1.0 }
    } else {
        // Positive current circulates through S1 + S3's diode or S4 + S2's diode.
        Conduction::Freewheel {
            forward: s1 || s4,
            reverse: s2 || s3,
        }
    }
}

/// Passive components, grid source and fault/leakage constants.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CircuitParams {
    pub c_in: f64,
    pub l1: f64,
    pub l2: f64,
    pub c_out: f64,
    /// Zero disables the leakage path.
    pub c_parasitic: f64,
    pub v_grid_peak: f64,
    pub f_grid: f64,
    pub r_damp: f64,
    pub r_fault: f64,
    pub r_ground: f64,
}

impl Default for CircuitParams {
    fn default() -> Self {
        CircuitParams {
            c_in: 5000e-6,
            l1: 1e-3,
            l2: 1e-3,
            c_out: 5000e-6,
            c_parasitic: 13300e-9,
            v_grid_peak: 100.0,
            f_grid: 60.0,
            r_damp: 0.05,
            r_fault: 0.1,
            r_ground: 1.0,
        }
    }
}

impl CircuitParams {
    pub fn validate(&self) -> Result<(), CircuitError> {
        let positive = [
            ("c_in", self.c_in),
            ("l1", self.l1),
            ("l2", self.l2),
            ("c_out", self.c_out),
            ("f_grid", self.f_grid),
            ("r_fault", self.r_fault),
            ("r_ground", self.r_ground),
        ];
        for (name, value) in positive {
            if !(value > 0.0) || !value.is_finite() {
                return Err(CircuitError::InvalidParams(format!(
                    "{name} must be positive, got {value}"
                )));
            }
        }
        let non_negative = [
            ("c_parasitic", self.c_parasitic),
            ("v_grid_peak", self.v_grid_peak),
            ("r_damp", self.r_damp),
        ];
        for (name, value) in non_negative {
            if !(value >= 0.0) || !value.is_finite() {
                return Err(CircuitError::InvalidParams(format!(
                    "{name} must be non-negative, got {value}"
                )));
            }
        }
        Ok(())
    }

    pub fn grid_period(&self) -> f64 {
        1.0 / self.f_grid
    }
}

pub fn grid_voltage(params: &CircuitParams, t: f64) -> f64 {
    params.v_grid_peak * (2.0 * PI * params.f_grid * t).sin()
}

/// Dynamic plant state.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct CircuitState {
    pub t: f64,
    /// Voltage across Ci, equal to the PV terminal voltage.
    pub v_pv: f64,
    /// Filter inductor current, positive towards the grid from leg A.
    pub i_l: f64,
    pub v_co: f64,
    pub v_cp: f64,
    /// Leakage current over the last step.
    pub i_leak: f64,
    /// Common-mode voltage over the last step.
    pub v_cm: f64,
}

impl CircuitState {
    pub fn new(v_pv: f64) -> Self {
        CircuitState {
            v_pv,
            ..Default::default()
        }
    }

    fn check_finite(&self) -> Result<(), CircuitError> {
        let fields = [
            ("t", self.t),
            ("v_pv", self.v_pv),
            ("i_l", self.i_l),
            ("v_co", self.v_co),
            ("v_cp", self.v_cp),
            ("i_leak", self.i_leak),
            ("v_cm", self.v_cm),
        ];
        match fields.into_iter().find(|(_, v)| !v.is_finite()) {
            Some((field, _)) => Err(CircuitError::BlowUp { field, t: self.t }),
            None => Ok(()),
        }
    }
}

/// Quantities evaluated at the start of a step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepSample {
    pub i_pv: f64,
    pub v_grid: f64,
    pub v_cm: f64,
    pub i_leak: f64,
}

/// Advance the plant by one forward-Euler step of length `dt` under `gates`.
pub fn step(
    state: &CircuitState,
    gates: SwitchVector,
    source: &impl CurrentSource,
    params: &CircuitParams,
    fault_active: bool,
    dt: f64,
) -> Result<(CircuitState, StepSample), CircuitError> {
    gates.validate()?;
    let v_grid = grid_voltage(params, state.t);
    let i_pv = source.current(state.v_pv)?;
    let i_fault = if fault_active {
        state.v_pv / params.r_fault
    } else {
        0.0
    };
    let inductance = params.l1 + params.l2;

    let mut i_l_next;
    let dv_pv;
    match conduction(gates) {
        Conduction::Drive { polarity } => {
            let v_out = polarity * state.v_pv;
            i_l_next = state.i_l + dt * (v_out - v_grid - state.i_l * params.r_damp) / inductance;
            dv_pv = (i_pv - polarity * state.i_l - i_fault) / params.c_in;
        }
        Conduction::Freewheel { forward, reverse } => {
            i_l_next = state.i_l + dt * (-v_grid - state.i_l * params.r_damp) / inductance;
            // Diodes block the unsupported direction.
            if (i_l_next > 0.0 && !forward) || (i_l_next < 0.0 && !reverse) {
                i_l_next = 0.0;
            }
            dv_pv = (i_pv - i_fault) / params.c_in;
        }
    }

    let t_next = state.t + dt;
    let v_co_next = if params.r_damp > 0.0 {
        let i_grid = (state.v_co - v_grid) / params.r_damp;
        state.v_co + dt * (state.i_l - i_grid) / params.c_out
    } else {
        grid_voltage(params, t_next)
    };

    let v_cm = common_mode_voltage(gates, state.v_pv, state.v_cm);
    let (i_leak, v_cp_next) = if params.c_parasitic > 0.0 {
        let i_leak = (v_cm - state.v_cp) / params.r_ground;
        (i_leak, state.v_cp + dt * i_leak / params.c_parasitic)
    } else {
        (0.0, v_cm)
    };

    let next = CircuitState {
        t: t_next,
        v_pv: state.v_pv + dt * dv_pv,
        i_l: i_l_next,
        v_co: v_co_next,
        v_cp: v_cp_next,
        i_leak,
        v_cm,
    };
    next.check_finite()?;
    Ok((
        next,
        StepSample {
            i_pv,
            v_grid,
            v_cm,
            i_leak,
        },
    ))
}
