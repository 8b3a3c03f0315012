//! Incremental-Conductance maximum power point tracking.
//!
//! Produces the PV voltage reference consumed by the controllers. The
//! update compares the incremental conductance `dI/dV` against the
//! instantaneous conductance `-I/V`; equality marks the MPP.

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MpptError {
    #[error("PV voltage collapsed to {0} V; incremental conductance is undefined")]
    Collapsed(f64),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MpptConfig {
    pub delta_v: f64,
    /// Update interval in seconds.
    pub period: f64,
    pub epsilon: f64,
    pub v_min: f64,
    pub v_max: f64,
}

impl MpptConfig {
    /// 0.5 V steps every 1 ms, 1% conductance band, reference clamped to
    /// `[0.5, 0.95]·voc_stc`.
    pub fn for_array(voc_stc: f64) -> Self {
        MpptConfig {
            delta_v: 0.5,
            period: 1e-3,
            epsilon: 0.01,
            v_min: 0.5 * voc_stc,
            v_max: 0.95 * voc_stc,
        }
    }

    pub fn validate(&self, ts: f64) -> Result<(), String> {
        if !(self.delta_v > 0.0) {
            return Err(format!("delta_v must be positive, got {}", self.delta_v));
        }
        if !(self.period >= ts) {
            return Err(format!(
                "MPPT period {} must be at least the sampling period {ts}",
                self.period
            ));
        }
        if !(self.epsilon >= 0.0) {
            return Err(format!("epsilon must be non-negative, got {}", self.epsilon));
        }
        if !(0.0 < self.v_min && self.v_min < self.v_max) {
            return Err(format!(
                "need 0 < v_min ({}) < v_max ({})",
                self.v_min, self.v_max
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MpptState {
    pub v_prev: f64,
    pub i_prev: f64,
    pub v_ref: f64,
    pub config: MpptConfig,
}

impl MpptState {
    /// Start at `v_ref` (clamped), with `(v, i)` as the previous measurement.
    pub fn new(config: MpptConfig, v_ref: f64, v: f64, i: f64) -> Self {
        MpptState {
            v_prev: v,
            i_prev: i,
            v_ref: v_ref.clamp(config.v_min, config.v_max),
            config,
        }
    }

    pub fn incond_update(&self, v: f64, i: f64) -> Result<MpptState, MpptError> {
        if !(v > 0.0) {
            return Err(MpptError::Collapsed(v));
        }
        let MpptConfig {
            delta_v, epsilon, ..
        } = self.config;
        let dv = v - self.v_prev;
        let di = i - self.i_prev;
        let step = if dv.abs() < 1e-6 {
            if di > 0.0 {
                delta_v
            } else if di < 0.0 {
                -delta_v
            } else {
                0.0
            }
        } else {
            let g = di / dv;
            let conductance = i / v;
            if (g + conductance).abs() <= epsilon * (conductance + 1e-9) {
                0.0
            } else if g > -conductance {
                delta_v
            } else {
                -delta_v
            }
        };
        Ok(MpptState {
            v_prev: v,
            i_prev: i,
            v_ref: (self.v_ref + step).clamp(self.config.v_min, self.config.v_max),
            config: self.config,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pv::{calibrate, mpp_oracle, AmbientCondition, CalibrationTargets, PvArray};
    use proptest::prelude::*;
    use std::sync::OnceLock;

    fn cfg() -> MpptConfig {
        MpptConfig::for_array(238.0)
    }

    fn stc_array() -> &'static (PvArray, f64) {
        static ARRAY: OnceLock<(PvArray, f64)> = OnceLock::new();
        ARRAY.get_or_init(|| {
            let p = calibrate(&CalibrationTargets::desk_scale()).unwrap();
            let mpp = mpp_oracle(&p, AmbientCondition::STC).unwrap();
            (p.at(AmbientCondition::STC), mpp.vmpp)
        })
    }

    #[test]
    fn no_perturbation_no_change() {
        let s = MpptState::new(cfg(), 190.0, 190.0, 7.0);
        let n = s.incond_update(190.0, 7.0).unwrap();
        assert_eq!(n.v_ref, 190.0);
    }

    #[test]
    fn zero_dv_uses_current_sign() {
        let s = MpptState::new(cfg(), 190.0, 190.0, 7.0);
        assert_eq!(s.incond_update(190.0, 7.1).unwrap().v_ref, 190.5);
        assert_eq!(s.incond_update(190.0, 6.9).unwrap().v_ref, 189.5);
    }

    #[test]
    fn holds_at_oracle_mpp() {
        let (array, vmpp) = *stc_array();
        // Symmetric samples around the MPP: the chord slope is the tangent slope there.
        let h = 1e-3;
        let (i_lo, i_hi) = (array.current(vmpp - h).unwrap(), array.current(vmpp + h).unwrap());
        let s = MpptState::new(cfg(), vmpp, vmpp - h, i_lo);
        let n = s.incond_update(vmpp + h, i_hi).unwrap();
        assert_eq!(n.v_ref, s.v_ref);
    }

    #[test]
    fn left_of_mpp_steps_up() {
        let (array, vmpp) = *stc_array();
        let v = 0.8 * vmpp;
        let s = MpptState::new(cfg(), v, v - 0.5, array.current(v - 0.5).unwrap());
        let n = s.incond_update(v, array.current(v).unwrap()).unwrap();
        assert_eq!(n.v_ref, (v + 0.5).clamp(cfg().v_min, cfg().v_max));
    }

    #[test]
    fn collapsed_voltage_is_an_error() {
        let s = MpptState::new(cfg(), 190.0, 190.0, 7.0);
        assert_eq!(s.incond_update(0.0, 7.5), Err(MpptError::Collapsed(0.0)));
    }

    proptest! {
        #[test]
        fn reference_stays_clamped(samples in proptest::collection::vec((-10.0f64..400.0, -20.0f64..20.0), 1..200)) {
            let c = cfg();
            let mut s = MpptState::new(c, 200.0, 200.0, 5.0);
            for (v, i) in samples {
                if let Ok(n) = s.incond_update(v, i) {
                    s = n;
                }
                prop_assert!(s.v_ref >= c.v_min && s.v_ref <= c.v_max);
            }
        }
    }
}
