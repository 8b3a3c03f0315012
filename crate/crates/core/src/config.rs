//! Scenario file parser.
//!
//! A scenario file is line oriented. `#` starts a comment that runs to the
//! end of the line; blank lines are ignored. `[name]` opens a section.
//! Inside ordinary sections each line is `key = value`. Inside `[events]`
//! each line is `time kind [value]`, whitespace separated. The full grammar
//! and key list live in `docs/scenario-format.md`.
//!
//! Overrides use `section.key=value` and replace (or add) the matching key
//! after the file is read, so they win over file values.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use thiserror::Error;

use crate::circuit::CircuitParams;
use crate::pv::{calibrate, AmbientCondition, CalibrationTargets};
use crate::scenario::{ControllerKind, Event, EventKind, Scenario, ScenarioError};

/// Where a setting came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Origin {
    /// 1-based line and column in the scenario file.
    File { line: usize, column: usize },
    /// 1-based position in the override list.
    Override { index: usize },
}

impl fmt::Display for Origin {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Origin::File { line, column } => write!(f, "line {line}, column {column}"),
            Origin::Override { index } => write!(f, "override #{index}"),
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ConfigError {
    #[error("{origin}: {message}")]
    Syntax { origin: Origin, message: String },
    #[error("{origin}: unknown section [{name}]")]
    UnknownSection { origin: Origin, name: String },
    #[error("{origin}: unknown key '{key}' in [{section}]")]
    UnknownKey {
        origin: Origin,
        section: String,
        key: String,
    },
    #[error("{origin}: '{section}.{key}' is set more than once")]
    Duplicate {
        origin: Origin,
        section: String,
        key: String,
    },
    #[error("{origin}: bad value for '{section}.{key}': {message}")]
    Value {
        origin: Origin,
        section: String,
        key: String,
        message: String,
    },
    #[error("missing required key '{section}.{key}'")]
    Missing { section: String, key: String },
    #[error("{}", .0.iter().map(|(o, m)| format!("{o}: {m}")).collect::<Vec<_>>().join("; "))]
    Events(Vec<(Origin, String)>),
    #[error(transparent)]
    Scenario(#[from] ScenarioError),
}

/// Accepted keys per section.
pub const KEYS: &[(&str, &[&str])] = &[
    (
        "scenario",
        &["duration", "controller", "seed", "irradiance", "temperature"],
    ),
    ("sim", &["dt", "ts", "trace_decimation"]),
    (
        "circuit",
        &[
            "c_in",
            "l1",
            "l2",
            "c_out",
            "c_parasitic",
            "v_grid",
            "v_grid_is_rms",
            "f_grid",
            "r_damp",
            "r_fault",
            "r_ground",
        ],
    ),
    (
        "pv",
        &[
            "preset",
            "vmpp",
            "pmax",
            "voc",
            "isc",
            "n_series_cells",
            "alpha_isc",
            "beta_voc",
        ],
    ),
    (
        "mppt",
        &[
            "delta_v",
            "period",
            "epsilon",
            "v_min",
            "v_max",
            "v_init",
            "track_band",
        ],
    ),
    (
        "pi",
        &[
            "kp_v",
            "ki_v",
            "kp_i",
            "ki_i",
            "carrier_freq",
            "i_ref_max",
            "v_int_max",
        ],
    ),
    (
        "metrics",
        &[
            "rms_window",
            "steady_cycles",
            "recovery_tolerance",
            "recovery_hold",
            "band_window",
        ],
    ),
];

#[derive(Debug, Clone)]
struct Setting {
    value: String,
    origin: Origin,
}

#[derive(Debug, Clone)]
struct EventRow {
    event: Event,
    origin: Origin,
}

/// Parsed but not yet interpreted scenario file.
#[derive(Debug, Clone, Default)]
pub struct RawConfig {
    settings: HashMap<(String, String), Setting>,
    events: Vec<EventRow>,
}

fn known_section(name: &str) -> Option<&'static [&'static str]> {
    KEYS.iter().find(|(s, _)| *s == name).map(|(_, k)| *k)
}

fn check_key(section: &str, key: &str, origin: Origin) -> Result<(), ConfigError> {
    match known_section(section) {
        None => Err(ConfigError::UnknownSection {
            origin,
            name: section.to_string(),
        }),
        Some(keys) if !keys.contains(&key) => Err(ConfigError::UnknownKey {
            origin,
            section: section.to_string(),
            key: key.to_string(),
        }),
        Some(_) => Ok(()),
    }
}

/// 1-based column of `sub`, which must be a slice of `line`.
fn column_of(line: &str, sub: &str) -> usize {
    sub.as_ptr() as usize - line.as_ptr() as usize + 1
}

fn parse_event(line: &str, body: &str, line_no: usize) -> Result<Event, ConfigError> {
    let tokens: Vec<&str> = body.split_whitespace().collect();
    let at = |tok: &str| Origin::File {
        line: line_no,
        column: column_of(line, tok),
    };
    let syntax = |tok: &str, message: String| ConfigError::Syntax {
        origin: at(tok),
        message,
    };
    let time: f64 = tokens[0]
        .parse()
        .map_err(|_| syntax(tokens[0], format!("event time '{}' is not a number", tokens[0])))?;
    let Some(&kind) = tokens.get(1) else {
        return Err(syntax(
            tokens[0],
            "event needs a kind (irradiance, temperature, fault_on, fault_off)".into(),
        ));
    };
    let value = |name: &str| -> Result<f64, ConfigError> {
        match tokens.get(2) {
            None => Err(syntax(kind, format!("'{name}' event needs a value"))),
            Some(tok) => tok
                .parse()
                .map_err(|_| syntax(tok, format!("'{tok}' is not a number"))),
        }
    };
    let (kind, arity) = match kind {
        "irradiance" => (EventKind::SetIrradiance(value(kind)?), 3),
        "temperature" => (EventKind::SetTemperature(value(kind)?), 3),
        "fault_on" => (EventKind::FaultOn, 2),
        "fault_off" => (EventKind::FaultOff, 2),
        other => {
            return Err(syntax(
                other,
                format!(
                    "unknown event kind '{other}' (expected irradiance, temperature, fault_on or fault_off)"
                ),
            ))
        }
    };
    if let Some(extra) = tokens.get(arity) {
        return Err(syntax(extra, format!("unexpected token '{extra}'")));
    }
    Ok(Event { time, kind })
}

impl RawConfig {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut raw = RawConfig::default();
        let mut section: Option<String> = None;
        for (idx, line) in text.lines().enumerate() {
            let line_no = idx + 1;
            let body = line.split('#').next().unwrap_or("");
            let trimmed = body.trim();
            if trimmed.is_empty() {
                continue;
            }
            let col = column_of(line, trimmed);
            let here = Origin::File {
                line: line_no,
                column: col,
            };
            if let Some(rest) = trimmed.strip_prefix('[') {
                let Some(name) = rest.strip_suffix(']') else {
                    return Err(ConfigError::Syntax {
                        origin: here,
                        message: "section header is missing ']'".into(),
                    });
                };
                let name = name.trim();
                if name != "events" && known_section(name).is_none() {
                    return Err(ConfigError::UnknownSection {
                        origin: here,
                        name: name.to_string(),
                    });
                }
                section = Some(name.to_string());
                continue;
            }
            let Some(current) = section.as_deref() else {
                return Err(ConfigError::Syntax {
                    origin: here,
                    message: "content before the first [section] header".into(),
                });
            };
            if current == "events" {
                let event = parse_event(line, trimmed, line_no)?;
                raw.events.push(EventRow {
                    event,
                    origin: here,
                });
                continue;
            }
            let Some((key, value)) = trimmed.split_once('=') else {
                return Err(ConfigError::Syntax {
                    origin: here,
                    message: format!("expected 'key = value', found '{trimmed}'"),
                });
            };
            let key = key.trim();
            let value = value.trim();
            let key_origin = Origin::File {
                line: line_no,
                column: column_of(line, key),
            };
            if key.is_empty() {
                return Err(ConfigError::Syntax {
                    origin: here,
                    message: "empty key".into(),
                });
            }
            check_key(current, key, key_origin)?;
            if value.is_empty() {
                return Err(ConfigError::Syntax {
                    origin: key_origin,
                    message: format!("'{key}' has no value"),
                });
            }
            let value_origin = Origin::File {
                line: line_no,
                column: column_of(line, value),
            };
            let slot = (current.to_string(), key.to_string());
            if raw.settings.contains_key(&slot) {
                return Err(ConfigError::Duplicate {
                    origin: key_origin,
                    section: slot.0,
                    key: slot.1,
                });
            }
            raw.settings.insert(
                slot,
                Setting {
                    value: value.to_string(),
                    origin: value_origin,
                },
            );
        }
        Ok(raw)
    }

    /// Apply `section.key=value` overrides in order.
    pub fn apply_overrides<S: AsRef<str>>(&mut self, overrides: &[S]) -> Result<(), ConfigError> {
        for (idx, text) in overrides.iter().enumerate() {
            let origin = Origin::Override { index: idx + 1 };
            let text = text.as_ref();
            let syntax = |message: String| ConfigError::Syntax { origin, message };
            let (path, value) = text
                .split_once('=')
                .ok_or_else(|| syntax(format!("expected section.key=value, found '{text}'")))?;
            let (section, key) = path
                .trim()
                .split_once('.')
                .ok_or_else(|| syntax(format!("expected section.key, found '{}'", path.trim())))?;
            let value = value.trim();
            check_key(section, key, origin)?;
            if value.is_empty() {
                return Err(syntax(format!("'{section}.{key}' has no value")));
            }
            self.settings.insert(
                (section.to_string(), key.to_string()),
                Setting {
                    value: value.to_string(),
                    origin,
                },
            );
        }
        Ok(())
    }

    fn get<T: FromStr>(&self, section: &str, key: &str) -> Result<Option<T>, ConfigError>
    where
        T::Err: fmt::Display,
    {
        let Some(s) = self.settings.get(&(section.to_string(), key.to_string())) else {
            return Ok(None);
        };
        s.value.parse::<T>().map(Some).map_err(|e| ConfigError::Value {
            origin: s.origin,
            section: section.to_string(),
            key: key.to_string(),
            message: format!("'{}': {e}", s.value),
        })
    }

    fn get_bool(&self, section: &str, key: &str) -> Result<Option<bool>, ConfigError> {
        let Some(s) = self.settings.get(&(section.to_string(), key.to_string())) else {
            return Ok(None);
        };
        match s.value.to_ascii_lowercase().as_str() {
            "true" | "yes" | "1" => Ok(Some(true)),
            "false" | "no" | "0" => Ok(Some(false)),
            other => Err(ConfigError::Value {
                origin: s.origin,
                section: section.to_string(),
                key: key.to_string(),
                message: format!("'{other}' is not a boolean (true/false)"),
            }),
        }
    }

    fn origin(&self, section: &str, key: &str) -> Option<Origin> {
        self.settings
            .get(&(section.to_string(), key.to_string()))
            .map(|s| s.origin)
    }

    /// Calibration targets from `[pv]`: the preset, then any explicit keys.
    pub fn pv_targets(&self) -> Result<CalibrationTargets, ConfigError> {
        let preset: Option<String> = self.get("pv", "preset")?;
        let mut t = match preset.as_deref() {
            None | Some("desk") => CalibrationTargets::desk_scale(),
            Some("full") => CalibrationTargets::full_scale(),
            Some(other) => {
                return Err(ConfigError::Value {
                    origin: self.origin("pv", "preset").expect("preset present"),
                    section: "pv".into(),
                    key: "preset".into(),
                    message: format!("unknown preset '{other}' (expected desk or full)"),
                })
            }
        };
        let set = |slot: &mut f64, key: &str| -> Result<(), ConfigError> {
            if let Some(v) = self.get("pv", key)? {
                *slot = v;
            }
            Ok(())
        };
        set(&mut t.vmpp, "vmpp")?;
        set(&mut t.pmax, "pmax")?;
        set(&mut t.voc, "voc")?;
        set(&mut t.isc, "isc")?;
        set(&mut t.alpha_isc, "alpha_isc")?;
        set(&mut t.beta_voc, "beta_voc")?;
        if let Some(n) = self.get("pv", "n_series_cells")? {
            t.n_series_cells = n;
        }
        Ok(t)
    }

    /// Build and validate the scenario.
    pub fn into_scenario(self) -> Result<Scenario, ConfigError> {
        let duration: f64 = self.get("scenario", "duration")?.ok_or(ConfigError::Missing {
            section: "scenario".into(),
            key: "duration".into(),
        })?;
        let controller: ControllerKind = self
            .get("scenario", "controller")?
            .unwrap_or(ControllerKind::MpcH5);

        let mut circuit = CircuitParams::default();
        {
            let set = |slot: &mut f64, key: &str| -> Result<(), ConfigError> {
                if let Some(v) = self.get("circuit", key)? {
                    *slot = v;
                }
                Ok(())
            };
            set(&mut circuit.c_in, "c_in")?;
            set(&mut circuit.l1, "l1")?;
            set(&mut circuit.l2, "l2")?;
            set(&mut circuit.c_out, "c_out")?;
            set(&mut circuit.c_parasitic, "c_parasitic")?;
            set(&mut circuit.v_grid_peak, "v_grid")?;
            set(&mut circuit.f_grid, "f_grid")?;
            set(&mut circuit.r_damp, "r_damp")?;
            set(&mut circuit.r_fault, "r_fault")?;
            set(&mut circuit.r_ground, "r_ground")?;
        }
        if self.get_bool("circuit", "v_grid_is_rms")?.unwrap_or(false) {
            circuit.v_grid_peak *= std::f64::consts::SQRT_2;
        }

        let targets = self.pv_targets()?;
        let pv = calibrate(&targets).map_err(ScenarioError::from)?;
        let mut s = Scenario::with_pv(controller, duration, pv, circuit);

        if let Some(seed) = self.get("scenario", "seed")? {
            s.seed = seed;
        }
        let irradiance = self.get("scenario", "irradiance")?.unwrap_or(AmbientCondition::STC.irradiance);
        let temperature = self
            .get("scenario", "temperature")?
            .unwrap_or(AmbientCondition::STC.temperature);
        s.initial_ambient = AmbientCondition {
            irradiance,
            temperature,
        };

        {
            let set = |slot: &mut f64, section: &str, key: &str| -> Result<(), ConfigError> {
                if let Some(v) = self.get(section, key)? {
                    *slot = v;
                }
                Ok(())
            };
            set(&mut s.sim.dt, "sim", "dt")?;
            set(&mut s.sim.ts, "sim", "ts")?;
            set(&mut s.mppt.config.delta_v, "mppt", "delta_v")?;
            set(&mut s.mppt.config.period, "mppt", "period")?;
            set(&mut s.mppt.config.epsilon, "mppt", "epsilon")?;
            set(&mut s.mppt.config.v_min, "mppt", "v_min")?;
            set(&mut s.mppt.config.v_max, "mppt", "v_max")?;
            set(&mut s.mppt.v_init, "mppt", "v_init")?;
            set(&mut s.mppt.track_band, "mppt", "track_band")?;
            set(&mut s.pi.kp_v, "pi", "kp_v")?;
            set(&mut s.pi.ki_v, "pi", "ki_v")?;
            set(&mut s.pi.kp_i, "pi", "kp_i")?;
            set(&mut s.pi.ki_i, "pi", "ki_i")?;
            set(&mut s.pi.carrier_freq, "pi", "carrier_freq")?;
            set(&mut s.pi.i_ref_max, "pi", "i_ref_max")?;
            set(&mut s.pi.v_int_max, "pi", "v_int_max")?;
            set(&mut s.metrics.steady_cycles, "metrics", "steady_cycles")?;
            set(&mut s.metrics.recovery_tolerance, "metrics", "recovery_tolerance")?;
            set(&mut s.metrics.recovery_hold, "metrics", "recovery_hold")?;
        }
        if let Some(n) = self.get("sim", "trace_decimation")? {
            s.sim.trace_decimation = n;
        }
        if let Some(w) = self.get("metrics", "rms_window")? {
            s.metrics.rms_window = Some(w);
        }
        if let Some(w) = self.get("metrics", "band_window")? {
            s.metrics.band_window = Some(w);
        }

        s.events = self.events.iter().map(|r| r.event).collect();
        let problems = s.event_problems();
        if !problems.is_empty() {
            return Err(ConfigError::Events(
                problems
                    .into_iter()
                    .map(|(idx, msg)| (self.events[idx].origin, msg))
                    .collect(),
            ));
        }
        s.validate()?;
        Ok(s)
    }
}

/// Parse a scenario file and apply overrides.
pub fn load<S: AsRef<str>>(text: &str, overrides: &[S]) -> Result<Scenario, ConfigError> {
    let mut raw = RawConfig::parse(text)?;
    raw.apply_overrides(overrides)?;
    raw.into_scenario()
}
