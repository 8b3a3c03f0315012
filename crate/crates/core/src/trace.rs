//! Per-step trace records and their CSV form.
//!
//! `trace.csv` layout, one header line then one row per record:
//!
//! ```text
//! t,v_pv,i_pv,i_l,v_ref,mode,i_leak,v_cm,fault
//! ```
//!
//! Floats use Rust's shortest round-trip formatting, so parsing a row gives
//! back bit-identical values. `mode` is the operation mode number (`1`..`4`)
//! when the applied gates match one, otherwise the five gate bits `S1..S5`
//! (e.g. `10101`). `fault` is `0` or `1`.

use std::io::{self, BufRead, Write};

use thiserror::Error;

use crate::circuit::SwitchVector;

pub const CSV_HEADER: &str = "t,v_pv,i_pv,i_l,v_ref,mode,i_leak,v_cm,fault";

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceRecord {
    pub t: f64,
    pub v_pv: f64,
    pub i_pv: f64,
    pub i_l: f64,
    pub v_ref: f64,
    /// Gates applied from `t` to the next plant step.
    pub gates: SwitchVector,
    /// PI modulation index in force; `None` under MPC. Not written to CSV.
    pub modulation: Option<f64>,
    pub i_leak: f64,
    pub v_cm: f64,
    pub fault: bool,
}

#[derive(Debug, Error)]
pub enum TraceReadError {
    #[error("line {line}: {message}")]
    Format { line: usize, message: String },
    #[error(transparent)]
    Io(#[from] io::Error),
}

pub fn write_csv<W: Write>(mut out: W, trace: &[TraceRecord]) -> io::Result<()> {
    writeln!(out, "{CSV_HEADER}")?;
    for r in trace {
        writeln!(
            out,
            "{},{},{},{},{},{},{},{},{}",
            r.t,
            r.v_pv,
            r.i_pv,
            r.i_l,
            r.v_ref,
            r.gates.label(),
            r.i_leak,
            r.v_cm,
            u8::from(r.fault)
        )?;
    }
    Ok(())
}

pub fn read_csv<R: BufRead>(input: R) -> Result<Vec<TraceRecord>, TraceReadError> {
    let mut lines = input.lines();
    let header = lines.next().transpose()?;
    match header {
        Some(h) if h.trim_end() == CSV_HEADER => {}
        _ => {
            return Err(TraceReadError::Format {
                line: 1,
                message: format!("expected header '{CSV_HEADER}'"),
            })
        }
    }
    let mut trace = Vec::new();
    for (idx, line) in lines.enumerate() {
        let line_no = idx + 2;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let err = |message: String| TraceReadError::Format {
            line: line_no,
            message,
        };
        let cols: Vec<&str> = line.trim_end().split(',').collect();
        if cols.len() != 9 {
            return Err(err(format!("expected 9 columns, found {}", cols.len())));
        }
        let num = |i: usize| -> Result<f64, TraceReadError> {
            cols[i]
                .parse::<f64>()
                .map_err(|e| err(format!("column {}: {e}", i + 1)))
        };
        let gates = SwitchVector::parse_label(cols[5])
            .ok_or_else(|| err(format!("column 6: bad mode '{}'", cols[5])))?;
        let fault = match cols[8] {
            "0" => false,
            "1" => true,
            other => return Err(err(format!("column 9: bad fault flag '{other}'"))),
        };
        trace.push(TraceRecord {
            t: num(0)?,
            v_pv: num(1)?,
            i_pv: num(2)?,
            i_l: num(3)?,
            v_ref: num(4)?,
            gates,
            modulation: None,
            i_leak: num(6)?,
            v_cm: num(7)?,
            fault,
        });
    }
    Ok(trace)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::circuit::OperationMode;
    use proptest::prelude::*;

    fn finite() -> impl Strategy<Value = f64> {
        prop::num::f64::NORMAL | prop::num::f64::ZERO | prop::num::f64::SUBNORMAL
    }

    proptest! {
        #[test]
        fn csv_round_trip_is_bit_exact(
            rows in prop::collection::vec((finite(), finite(), finite(), 0u8..32, any::<bool>()), 0..40)
        ) {
            let trace: Vec<TraceRecord> = rows
                .iter()
                .map(|&(a, b, c, bits, fault)| TraceRecord {
                    t: a,
                    v_pv: b,
                    i_pv: c,
                    i_l: -a,
                    v_ref: b * 0.5,
                    gates: SwitchVector::new(bits & 1 != 0, bits & 2 != 0, bits & 4 != 0, bits & 8 != 0, bits & 16 != 0),
                    modulation: None,
                    i_leak: c,
                    v_cm: a,
                    fault,
                })
                .collect();
            let mut buf = Vec::new();
            write_csv(&mut buf, &trace).unwrap();
            let back = read_csv(buf.as_slice()).unwrap();
            prop_assert_eq!(back, trace);
        }
    }

    #[test]
    fn rejects_bad_rows() {
        let text = format!("{CSV_HEADER}\n0,1,2,3,4,9,6,7,0\n");
        match read_csv(text.as_bytes()) {
            Err(TraceReadError::Format { line, .. }) => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
        assert!(read_csv("t,v\n".as_bytes()).is_err());
        let ok = format!("{CSV_HEADER}\n0,1,2,3,4,2,6,7,1\n");
        let tr = read_csv(ok.as_bytes()).unwrap();
        assert_eq!(tr[0].gates, OperationMode::Mode2.gates());
        assert!(tr[0].fault);
    }
}
