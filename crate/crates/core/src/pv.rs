//! Single-diode PV array model.
//!
//! The array is a controlled current source whose terminal current is the
//! implicit solution of
//!
//! ```text
//! i = Iph(G,T) - I0(T)·(exp((v + i·Rs)/(n·Ns·Vt)) - 1) - (v + i·Rs)/Rsh
//! ```
//!
//! Parameters are obtained from datasheet-style STC ratings by [`calibrate`],
//! and [`mpp_oracle`] locates the maximum power point by brute force. The
//! oracle is only used for verification and reporting; controllers never see it.

use thiserror::Error;

use crate::circuit::CurrentSource;

const BOLTZMANN: f64 = 1.380_649e-23;
const ELECTRON_CHARGE: f64 = 1.602_176_634e-19;
const KELVIN_OFFSET: f64 = 273.15;

/// STC irradiance in W/m².
pub const STC_IRRADIANCE: f64 = 1000.0;
/// STC cell temperature in °C.
pub const STC_TEMPERATURE: f64 = 25.0;

/// Resolution of the brute-force MPP scan.
pub const ORACLE_STEP: f64 = 1e-3;

const MAX_SOLVER_ITERATIONS: usize = 200;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PvError {
    #[error("implicit current solve did not converge at v = {v} V (last bracket [{lo}, {hi}] A)")]
    NonConvergence { v: f64, lo: f64, hi: f64 },
    #[error("invalid PV parameters: {0}")]
    InvalidParams(String),
    #[error("invalid ambient condition: {0}")]
    InvalidAmbient(String),
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CalibrationError {
    #[error("inconsistent calibration targets: {0}")]
    InvalidTargets(String),
    #[error("no single-diode fit reproduces the targets; residuals: {}", residuals.join("; "))]
    Infeasible { residuals: Vec<String> },
    #[error(transparent)]
    Model(#[from] PvError),
}

/// Irradiance (W/m²) and cell temperature (°C).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AmbientCondition {
    pub irradiance: f64,
    pub temperature: f64,
}

impl AmbientCondition {
    pub const STC: AmbientCondition = AmbientCondition {
        irradiance: STC_IRRADIANCE,
        temperature: STC_TEMPERATURE,
    };

    pub fn new(irradiance: f64, temperature: f64) -> Result<Self, PvError> {
        let ambient = AmbientCondition {
            irradiance,
            temperature,
        };
        ambient.validate()?;
        Ok(ambient)
    }

    pub fn validate(&self) -> Result<(), PvError> {
        if !(self.irradiance >= 0.0) || !self.irradiance.is_finite() {
            return Err(PvError::InvalidAmbient(format!(
                "irradiance must be >= 0 W/m², got {}",
                self.irradiance
            )));
        }
        if !(-40.0..=90.0).contains(&self.temperature) {
            return Err(PvError::InvalidAmbient(format!(
                "temperature must lie in [-40, 90] °C, got {}",
                self.temperature
            )));
        }
        Ok(())
    }
}

impl Default for AmbientCondition {
    fn default() -> Self {
        Self::STC
    }
}

/// STC ratings the calibration has to reproduce.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CalibrationTargets {
    pub vmpp: f64,
    pub pmax: f64,
    pub voc: f64,
    pub isc: f64,
    pub n_series_cells: u32,
    /// A/°C
    pub alpha_isc: f64,
    /// V/°C
    pub beta_voc: f64,
}

impl CalibrationTargets {
    /// 190 V / 1.33 kW array: the 133 kW rating with every current scaled by 1/100.
    pub fn desk_scale() -> Self {
        CalibrationTargets {
            vmpp: 190.0,
            pmax: 1330.0,
            voc: 238.0,
            isc: 7.55,
            n_series_cells: 390,
            alpha_isc: 0.0032,
            beta_voc: -0.85,
        }
    }

    /// 190 V / 133 kW array.
    pub fn full_scale() -> Self {
        let desk = Self::desk_scale();
        CalibrationTargets {
            pmax: desk.pmax * 100.0,
            isc: desk.isc * 100.0,
            alpha_isc: desk.alpha_isc * 100.0,
            ..desk
        }
    }

    pub fn impp(&self) -> f64 {
        self.pmax / self.vmpp
    }

    fn validate(&self) -> Result<(), CalibrationError> {
        let bad = |msg: String| Err(CalibrationError::InvalidTargets(msg));
        let all = [self.vmpp, self.pmax, self.voc, self.isc];
        if all.iter().any(|x| !x.is_finite() || *x <= 0.0) {
            return bad(format!(
                "vmpp, pmax, voc and isc must be positive and finite ({self:?})"
            ));
        }
        if self.vmpp >= self.voc {
            return bad(format!("vmpp {} must be below voc {}", self.vmpp, self.voc));
        }
        if self.impp() >= self.isc {
            return bad(format!(
                "impp = pmax/vmpp = {} must be below isc {}",
                self.impp(),
                self.isc
            ));
        }
        if self.n_series_cells == 0 {
            return bad("n_series_cells must be at least 1".into());
        }
        Ok(())
    }
}

/// Single-diode array parameters referenced to STC.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PvModelParams {
    pub isc_stc: f64,
    pub voc_stc: f64,
    pub vmpp_stc: f64,
    pub impp_stc: f64,
    pub diode_ideality: f64,
    pub r_series: f64,
    pub r_shunt: f64,
    pub alpha_isc: f64,
    pub beta_voc: f64,
    pub n_series_cells: u32,
    /// Diode saturation current at STC.
    pub i0_stc: f64,
    /// Photocurrent at STC.
    pub iph_stc: f64,
}

impl PvModelParams {
    pub fn validate(&self) -> Result<(), PvError> {
        let fail = |msg: String| Err(PvError::InvalidParams(msg));
        if !(0.0 < self.vmpp_stc && self.vmpp_stc < self.voc_stc) {
            return fail(format!(
                "need 0 < vmpp_stc ({}) < voc_stc ({})",
                self.vmpp_stc, self.voc_stc
            ));
        }
        if !(0.0 < self.impp_stc && self.impp_stc < self.isc_stc) {
            return fail(format!(
                "need 0 < impp_stc ({}) < isc_stc ({})",
                self.impp_stc, self.isc_stc
            ));
        }
        if !(self.r_series >= 0.0) {
            return fail(format!("r_series must be >= 0, got {}", self.r_series));
        }
        if !(self.r_shunt > 0.0) {
            return fail(format!("r_shunt must be > 0, got {}", self.r_shunt));
        }
        if !(1.0..=2.0).contains(&self.diode_ideality) {
            return fail(format!(
                "diode_ideality must lie in [1, 2], got {}",
                self.diode_ideality
            ));
        }
        if !(self.i0_stc > 0.0) || !(self.iph_stc > 0.0) {
            return fail(format!(
                "i0_stc ({}) and iph_stc ({}) must be positive",
                self.i0_stc, self.iph_stc
            ));
        }
        if self.n_series_cells == 0 {
            return fail("n_series_cells must be at least 1".into());
        }
        Ok(())
    }

    /// Modified ideality factor n·Ns·Vt at the given cell temperature.
    fn thermal_voltage(&self, temperature: f64) -> f64 {
        let vt = BOLTZMANN * (temperature + KELVIN_OFFSET) / ELECTRON_CHARGE;
        self.diode_ideality * self.n_series_cells as f64 * vt
    }

    /// Freeze the ambient-dependent terms into an evaluable array.
    pub fn at(&self, ambient: AmbientCondition) -> PvArray {
        let dt = ambient.temperature - STC_TEMPERATURE;
        let a_ref = self.thermal_voltage(STC_TEMPERATURE);
        let a = self.thermal_voltage(ambient.temperature);
        let isc_t = self.isc_stc + self.alpha_isc * dt;
        let voc_t = self.voc_stc + self.beta_voc * dt;
        let i0 = self.i0_stc * (isc_t / self.isc_stc) * (self.voc_stc / a_ref).exp_m1()
            / (voc_t / a).exp_m1();
        let iph = (self.iph_stc + self.alpha_isc * dt) * ambient.irradiance / STC_IRRADIANCE;
        PvArray {
            iph: iph.max(0.0),
            i0,
            a,
            r_series: self.r_series,
            g_shunt: 1.0 / self.r_shunt,
            current_scale: self.isc_stc,
        }
    }
}

/// A PV array evaluated at a fixed ambient condition.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PvArray {
    pub iph: f64,
    pub i0: f64,
    /// n·Ns·Vt
    pub a: f64,
    pub r_series: f64,
    pub g_shunt: f64,
    current_scale: f64,
}

impl PvArray {
    /// Residual of the single-diode equation and its derivative in `i`.
    fn residual(&self, v: f64, i: f64) -> (f64, f64) {
        let vd = v + i * self.r_series;
        let x = vd / self.a;
        let f = self.iph - self.i0 * x.exp_m1() - vd * self.g_shunt - i;
        let df = -self.i0 * self.r_series / self.a * x.exp() - self.r_series * self.g_shunt - 1.0;
        (f, df)
    }

    /// Relative residual `|f(i)| / max(Iph, Isc)` for a candidate current.
    pub fn relative_residual(&self, v: f64, i: f64) -> f64 {
        self.residual(v, i).0.abs() / self.iph.max(self.current_scale)
    }

    pub fn current(&self, v: f64) -> Result<f64, PvError> {
        let f = |i: f64| self.residual(v, i);
        // f is strictly decreasing in i; grow a bracket with f(lo) >= 0 >= f(hi).
        let mut lo = self.iph.min(0.0) - 1.0;
        let mut hi = self.iph.max(0.0) + 1e-3;
        let mut grow = 0;
        while f(lo).0 < 0.0 {
            lo = 2.0 * lo - 1.0;
            grow += 1;
            if grow > 100 {
                return Err(PvError::NonConvergence { v, lo, hi });
            }
        }
        while f(hi).0 > 0.0 {
            hi = 2.0 * hi + 1.0;
            grow += 1;
            if grow > 100 {
                return Err(PvError::NonConvergence { v, lo, hi });
            }
        }
        let guess = (self.iph - v * self.g_shunt).clamp(lo, hi);
        safe_newton(f, lo, hi, guess).map_err(|(lo, hi)| PvError::NonConvergence { v, lo, hi })
    }

    /// Terminal voltage at which the current is zero.
    pub fn open_circuit_voltage(&self) -> Result<f64, PvError> {
        if self.iph <= 0.0 {
            return Ok(0.0);
        }
        let f = |v: f64| {
            let x = v / self.a;
            (
                self.iph - self.i0 * x.exp_m1() - v * self.g_shunt,
                -self.i0 / self.a * x.exp() - self.g_shunt,
            )
        };
        let mut hi = self.a;
        while f(hi).0 > 0.0 {
            hi *= 2.0;
            if !hi.is_finite() {
                return Err(PvError::NonConvergence {
                    v: f64::NAN,
                    lo: 0.0,
                    hi,
                });
            }
        }
        let guess = self.a * (self.iph / self.i0).ln_1p().min(hi / self.a);
        safe_newton(f, 0.0, hi, guess.clamp(0.0, hi))
            .map_err(|(lo, hi)| PvError::NonConvergence { v: f64::NAN, lo, hi })
    }
}

impl CurrentSource for PvArray {
    fn current(&self, v: f64) -> Result<f64, PvError> {
        PvArray::current(self, v)
    }
}

/// Newton iteration safeguarded by bisection for a function decreasing on
/// `[lo, hi]` with `f(lo) >= 0 >= f(hi)`. Returns the last bracket on failure.
fn safe_newton(
    f: impl Fn(f64) -> (f64, f64),
    mut lo: f64,
    mut hi: f64,
    mut x: f64,
) -> Result<f64, (f64, f64)> {
    for _ in 0..MAX_SOLVER_ITERATIONS {
        let (fx, dfx) = f(x);
        if fx == 0.0 {
            return Ok(x);
        }
        if fx > 0.0 {
            lo = x;
        } else {
            hi = x;
        }
        let newton = x - fx / dfx;
        let next = if newton.is_finite() && newton > lo && newton < hi {
            newton
        } else {
            0.5 * (lo + hi)
        };
        let tol = 1e-9 * next.abs().max(1e-6);
        if (next - x).abs() <= tol || (hi - lo) <= tol {
            return Ok(next);
        }
        x = next;
    }
    Err((lo, hi))
}

/// Terminal current of the array at voltage `v` under `ambient`.
pub fn pv_current(
    params: &PvModelParams,
    v: f64,
    ambient: AmbientCondition,
) -> Result<f64, PvError> {
    params.at(ambient).current(v)
}

/// Maximum power point found by the brute-force scan.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MppPoint {
    pub vmpp: f64,
    pub impp: f64,
    pub pmax: f64,
    pub voc: f64,
}

/// Scan `[0, voc]` at [`ORACLE_STEP`] and return the argmax of `v·i(v)`.
pub fn mpp_oracle(params: &PvModelParams, ambient: AmbientCondition) -> Result<MppPoint, PvError> {
    let array = params.at(ambient);
    let voc = array.open_circuit_voltage()?;
    let mut best = MppPoint {
        vmpp: 0.0,
        impp: array.current(0.0)?,
        pmax: 0.0,
        voc,
    };
    for (v, i) in scan(&array, voc, ORACLE_STEP) {
        let i = i?;
        let p = v * i;
        if p > best.pmax {
            best = MppPoint {
                vmpp: v,
                impp: i,
                pmax: p,
                voc,
            };
        }
    }
    Ok(best)
}

/// Iterate `(v, i(v))` over `v = k·step`, `k = 0..=floor(v_max/step)`.
pub fn scan(
    array: &PvArray,
    v_max: f64,
    step: f64,
) -> impl Iterator<Item = (f64, Result<f64, PvError>)> + '_ {
    let n = (v_max / step).floor().max(0.0) as usize;
    (0..=n).map(move |k| {
        let v = k as f64 * step;
        (v, array.current(v))
    })
}

/// Fit `(I0, Iph, Rs, Rsh, n)` to STC targets.
///
/// For a fixed ideality factor and series resistance the short-circuit,
/// open-circuit and MPP conditions are linear in `(Iph, I0, 1/Rsh)`. The
/// remaining condition `dP/dV = 0` at the MPP is solved for `Rs` by a
/// sign-change scan followed by bisection. Ideality factors are tried from
/// 1.3 outward until a physically valid fit whose brute-force MPP lands
/// within 1% of the target voltage is found.
pub fn calibrate(targets: &CalibrationTargets) -> Result<PvModelParams, CalibrationError> {
    targets.validate()?;
    let mut residuals = Vec::new();
    for n in ideality_candidates() {
        match fit_for_ideality(targets, n) {
            Some(params) => {
                let mpp = mpp_oracle(&params, AmbientCondition::STC)?;
                let rel = (mpp.vmpp - targets.vmpp).abs() / targets.vmpp;
                if rel <= 0.01 && count_local_maxima(&params, AmbientCondition::STC)? == 1 {
                    return Ok(params);
                }
                residuals.push(format!(
                    "n={n:.2}: oracle vmpp {:.3} V vs {} V",
                    mpp.vmpp, targets.vmpp
                ));
            }
            None => residuals.push(format!("n={n:.2}: no valid series resistance")),
        }
    }
    Err(CalibrationError::Infeasible { residuals })
}

fn ideality_candidates() -> Vec<f64> {
    let mut grid: Vec<f64> = (0..=20).map(|k| 1.0 + 0.05 * k as f64).collect();
    grid.sort_by(|a, b| (a - 1.3).abs().total_cmp(&(b - 1.3).abs()));
    grid
}

struct LinearFit {
    iph: f64,
    i0: f64,
    g: f64,
}

fn solve_linear(t: &CalibrationTargets, a: f64, rs: f64) -> Option<LinearFit> {
    let impp = t.impp();
    let e1 = (t.isc * rs / a).exp_m1();
    let e2 = (t.voc / a).exp_m1();
    let e3 = ((t.vmpp + impp * rs) / a).exp_m1();
    // [e2-e1, voc - isc·rs] [i0]   [isc]
    // [e3-e1, vmpp + (impp-isc)·rs] [g] = [isc - impp]
    let (m11, m12) = (e2 - e1, t.voc - t.isc * rs);
    let (m21, m22) = (e3 - e1, t.vmpp + (impp - t.isc) * rs);
    let (b1, b2) = (t.isc, t.isc - impp);
    let det = m11 * m22 - m12 * m21;
    if det == 0.0 || !det.is_finite() {
        return None;
    }
    let i0 = (b1 * m22 - m12 * b2) / det;
    let g = (m11 * b2 - b1 * m21) / det;
    let iph = t.isc + i0 * e1 + g * t.isc * rs;
    (i0 > 0.0 && g > 0.0 && iph > 0.0).then_some(LinearFit { iph, i0, g })
}

fn fit_for_ideality(t: &CalibrationTargets, n: f64) -> Option<PvModelParams> {
    let vt = BOLTZMANN * (STC_TEMPERATURE + KELVIN_OFFSET) / ELECTRON_CHARGE;
    let a = n * t.n_series_cells as f64 * vt;
    let impp = t.impp();
    let mpp_slope = |rs: f64| -> Option<f64> {
        let fit = solve_linear(t, a, rs)?;
        let x = (t.vmpp + impp * rs) / a;
        let d = fit.i0 / a * x.exp() + fit.g;
        Some(impp / t.vmpp - d / (1.0 + rs * d))
    };
    let rs_max = (t.voc - t.vmpp) / impp;
    const GRID: usize = 400;
    let mut prev: Option<(f64, f64)> = None;
    for k in 0..=GRID {
        let rs = rs_max * k as f64 / GRID as f64;
        let h = match mpp_slope(rs) {
            Some(h) => h,
            None => {
                prev = None;
                continue;
            }
        };
        if let Some((rs_prev, h_prev)) = prev {
            if h_prev.signum() != h.signum() || h == 0.0 {
                let (mut lo, mut hi, mut h_lo) = (rs_prev, rs, h_prev);
                for _ in 0..200 {
                    let mid = 0.5 * (lo + hi);
                    let h_mid = mpp_slope(mid)?;
                    if h_mid.signum() == h_lo.signum() {
                        lo = mid;
                        h_lo = h_mid;
                    } else {
                        hi = mid;
                    }
                    if hi - lo <= 1e-14 * rs_max {
                        break;
                    }
                }
                let rs = 0.5 * (lo + hi);
                let fit = solve_linear(t, a, rs)?;
                let params = PvModelParams {
                    isc_stc: t.isc,
                    voc_stc: t.voc,
                    vmpp_stc: t.vmpp,
                    impp_stc: impp,
                    diode_ideality: n,
                    r_series: rs,
                    r_shunt: 1.0 / fit.g,
                    alpha_isc: t.alpha_isc,
                    beta_voc: t.beta_voc,
                    n_series_cells: t.n_series_cells,
                    i0_stc: fit.i0,
                    iph_stc: fit.iph,
                };
                return params.validate().ok().map(|_| params);
            }
        }
        prev = Some((rs, h));
    }
    None
}

/// Number of strict local maxima of `v·i(v)` on the oracle grid over `[0, voc]`.
pub fn count_local_maxima(params: &PvModelParams, ambient: AmbientCondition) -> Result<usize, PvError> {
    let array = params.at(ambient);
    let voc = array.open_circuit_voltage()?;
    let mut powers = Vec::new();
    for (v, i) in scan(&array, voc, ORACLE_STEP) {
        powers.push(v * i?);
    }
    Ok(powers
        .windows(3)
        .filter(|w| w[1] > w[0] && w[1] >= w[2])
        .count())
}
