//! `h5sim`: run scenarios, compare controllers, dump PV curves and run the
//! acceptance checks.
//!
//! Exit codes: 0 success, 1 I/O failure or failed check, 2 bad arguments or
//! configuration, 3 numerical blow-up.

use std::fmt::Write as _;
use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use h5sim_core::acceptance;
use h5sim_core::config::{self, RawConfig};
use h5sim_core::metrics::{Metrics, MetricsContext};
use h5sim_core::plot::{render, Panel, Series};
use h5sim_core::pv::{calibrate, mpp_oracle, AmbientCondition, CalibrationTargets, PvModelParams, ORACLE_STEP};
use h5sim_core::trace::{write_csv, TraceRecord};
use h5sim_core::{ControllerKind, EngineError, RunOutput, Scenario};

#[derive(Parser)]
#[command(name = "h5sim", version, about = "Transformerless H5 PV inverter simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate one scenario and write its trace, metrics and plots.
    Run(ScenarioArgs),
    /// Simulate a scenario under every controller and compare leakage.
    Compare(ScenarioArgs),
    /// Write the I-V and P-V curves of the array with its MPP marked.
    Mppcurve(MppArgs),
    /// Run the acceptance checks and print one line per criterion.
    Accept,
}

#[derive(Args)]
struct Output {
    /// Output directory.
    #[arg(long, env = "H5SIM_OUT_DIR", default_value = "out")]
    out: PathBuf,
    #[arg(long, value_enum, default_value_t = Format::Csv)]
    format: Format,
    /// Override a scenario key, e.g. `circuit.f_grid=50`. Repeatable.
    #[arg(long = "override", value_name = "SECTION.KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Args)]
struct ScenarioArgs {
    scenario: PathBuf,
    #[command(flatten)]
    output: Output,
}

#[derive(Args)]
struct MppArgs {
    /// Scenario whose [pv] section defines the array; desk-scale preset if absent.
    scenario: Option<PathBuf>,
    #[arg(long, default_value_t = 1000.0)]
    irradiance: f64,
    #[arg(long, default_value_t = 25.0)]
    temperature: f64,
    /// Oracle grid points between written rows.
    #[arg(long, default_value_t = 100, value_parser = clap::value_parser!(u64).range(1..))]
    stride: u64,
    #[command(flatten)]
    output: Output,
}

#[derive(Clone, Copy, PartialEq, ValueEnum)]
enum Format {
    Csv,
    #[value(name = "csv+svg")]
    CsvSvg,
}

/// Error with its exit code.
struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn io(path: &Path, e: io::Error) -> Self {
        Failure {
            code: 1,
            message: format!("{}: {e}", path.display()),
        }
    }

    fn config(message: impl Into<String>) -> Self {
        Failure {
            code: 2,
            message: message.into(),
        }
    }
}

type Result<T> = std::result::Result<T, Failure>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run(args) => cmd_run(&args),
        Command::Compare(args) => cmd_compare(&args),
        Command::Mppcurve(args) => cmd_mppcurve(&args),
        Command::Accept => cmd_accept(),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Failure::io(path, e))
}

fn load_scenario(args: &ScenarioArgs) -> Result<Scenario> {
    let text = read_text(&args.scenario)?;
    config::load(&text, &args.output.overrides)
        .map_err(|e| Failure::config(format!("{}: {e}", args.scenario.display())))
}

fn create_out_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Failure::io(dir, e))
}

fn write_file(path: &Path, f: impl FnOnce(&mut BufWriter<File>) -> io::Result<()>) -> Result<()> {
    let file = File::create(path).map_err(|e| Failure::io(path, e))?;
    let mut w = BufWriter::new(file);
    f(&mut w).and_then(|()| w.flush()).map_err(|e| Failure::io(path, e))
}

fn engine_failure(e: EngineError) -> Failure {
    match e {
        EngineError::Invalid(e) => Failure::config(e.to_string()),
        e @ EngineError::Integration { .. } => Failure {
            code: 3,
            message: e.to_string(),
        },
    }
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| "none".to_string(), |x| x.to_string())
}

/// `metrics.txt`: one `key: value` line per entry, floats in shortest
/// round-trip form, `none` for undefined values.
fn metrics_text(s: &Scenario, ctx: &MetricsContext, m: &Metrics, records: usize) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "controller: {}", s.controller.key());
    let _ = writeln!(out, "records: {records}");
    let _ = writeln!(out, "sample_dt: {}", ctx.sample_dt);
    let _ = writeln!(out, "grid_period: {}", ctx.grid_period);
    let _ = writeln!(out, "rms_window: {}", ctx.rms_window);
    let _ = writeln!(out, "steady_cycles: {}", ctx.steady_cycles);
    let _ = writeln!(out, "recovery_tolerance: {}", ctx.recovery_tolerance);
    let _ = writeln!(out, "recovery_hold: {}", ctx.recovery_hold);
    let _ = writeln!(out, "band_window: {}", ctx.band_window);
    let _ = writeln!(out, "leak_rms: {}", opt(m.leak_rms));
    let _ = writeln!(out, "leak_rms_peak: {}", opt(m.leak_rms_series.iter().copied().reduce(f64::max)));
    let _ = writeln!(out, "vpv_tracking_err: {}", opt(m.vpv_tracking_err));
    let _ = writeln!(out, "switch_transitions_per_cycle: {}", opt(m.switch_transitions_per_cycle));
    let _ = writeln!(out, "fault_recovery_time: {}", opt(m.fault_recovery_time));
    out
}

fn column(trace: &[TraceRecord], f: impl Fn(&TraceRecord) -> f64) -> Vec<(f64, f64)> {
    trace.iter().map(|r| (r.t, f(r))).collect()
}

/// `(t, rms)` pairs, each value stamped at the last record of its window.
fn rms_points(trace: &[TraceRecord], m: &Metrics) -> Vec<(f64, f64)> {
    let lag = trace.len() + 1 - m.leak_rms_series.len().max(1);
    m.leak_rms_series
        .iter()
        .enumerate()
        .map(|(k, &v)| (trace[k + lag - 1].t, v))
        .collect()
}

fn cmd_run(args: &ScenarioArgs) -> Result<()> {
    let s = load_scenario(args)?;
    let out_dir = &args.output.out;
    create_out_dir(out_dir)?;
    let (output, failure) = match h5sim_core::run(&s) {
        Ok(o) => (o, None),
        Err(EngineError::Integration { error, trace }) => {
            // Keep what was simulated before the failure.
            let metrics = h5sim_core::metrics::compute(&trace, &MetricsContext::for_scenario(&s));
            let f = Failure {
                code: 3,
                message: format!("{error} ({} trace records written)", trace.len()),
            };
            (RunOutput { trace, metrics }, Some(f))
        }
        Err(e) => return Err(engine_failure(e)),
    };
    let ctx = MetricsContext::for_scenario(&s);
    let trace_path = out_dir.join("trace.csv");
    write_file(&trace_path, |w| write_csv(w, &output.trace))?;
    let metrics_path = out_dir.join("metrics.txt");
    let text = metrics_text(&s, &ctx, &output.metrics, output.trace.len());
    write_file(&metrics_path, |w| w.write_all(text.as_bytes()))?;
    if args.output.format == Format::CsvSvg {
        let tr = &output.trace;
        let pv = render(
            &[
                Panel {
                    title: "PV voltage".into(),
                    y_label: "V".into(),
                    series: vec![
                        Series::new("v_pv", column(tr, |r| r.v_pv)),
                        Series::new("v_ref", column(tr, |r| r.v_ref)),
                    ],
                },
                Panel {
                    title: "PV current".into(),
                    y_label: "A".into(),
                    series: vec![Series::new("i_pv", column(tr, |r| r.i_pv))],
                },
            ],
            "t [s]",
        );
        let leak = render(
            &[Panel {
                title: "Leakage current".into(),
                y_label: "A".into(),
                series: vec![
                    Series::new("i_leak", column(tr, |r| r.i_leak)),
                    Series::new("rms", rms_points(tr, &output.metrics)),
                ],
            }],
            "t [s]",
        );
        let p = out_dir.join("pv.svg");
        write_file(&p, |w| w.write_all(pv.as_bytes()))?;
        let p = out_dir.join("leakage.svg");
        write_file(&p, |w| w.write_all(leak.as_bytes()))?;
    }
    print!("{text}");
    match failure {
        Some(f) => Err(f),
        None => Ok(()),
    }
}

/// Every leak RMS at or below this counts as no leakage at all.
const NO_LEAKAGE: f64 = 1e-9;

fn cmd_compare(args: &ScenarioArgs) -> Result<()> {
    let base = load_scenario(args)?;
    let out_dir = &args.output.out;
    create_out_dir(out_dir)?;
    let runs: Vec<_> = std::thread::scope(|scope| {
        let handles: Vec<_> = ControllerKind::ALL
            .map(|kind| {
                let s = base.clone().with_controller(kind);
                (kind, scope.spawn(move || h5sim_core::run(&s)))
            })
            .into_iter()
            .collect();
        handles
            .into_iter()
            .map(|(kind, h)| (kind, h.join().expect("simulation thread panicked")))
            .collect()
    });
    let mut outputs = Vec::new();
    for (kind, r) in runs {
        outputs.push((kind, r.map_err(engine_failure)?));
    }

    let mut table = String::new();
    let _ = writeln!(
        table,
        "{:<16} {:>14} {:>22} {:>18}",
        "controller", "leak_rms [A]", "transitions/cycle", "tracking err [%]"
    );
    let mut csv = String::from("controller,leak_rms,switch_transitions_per_cycle,vpv_tracking_err\n");
    for (kind, o) in &outputs {
        let m = &o.metrics;
        let _ = writeln!(
            table,
            "{:<16} {:>14.6} {:>22.2} {:>18.3}",
            kind.key(),
            m.leak_rms.unwrap_or(f64::NAN),
            m.switch_transitions_per_cycle.unwrap_or(f64::NAN),
            100.0 * m.vpv_tracking_err.unwrap_or(f64::NAN)
        );
        let _ = writeln!(
            csv,
            "{},{},{},{}",
            kind.key(),
            opt(m.leak_rms),
            opt(m.switch_transitions_per_cycle),
            opt(m.vpv_tracking_err)
        );
    }
    let p = out_dir.join("compare.csv");
    write_file(&p, |w| w.write_all(csv.as_bytes()))?;

    let series: Vec<Vec<(f64, f64)>> = outputs.iter().map(|(_, o)| rms_points(&o.trace, &o.metrics)).collect();
    let p = out_dir.join("leak_overlay.csv");
    write_file(&p, |w| {
        write!(w, "t")?;
        for (kind, _) in &outputs {
            write!(w, ",{}", kind.key())?;
        }
        writeln!(w)?;
        let rows = series.iter().map(Vec::len).min().unwrap_or(0);
        for k in 0..rows {
            write!(w, "{}", series[0][k].0)?;
            for s in &series {
                write!(w, ",{}", s[k].1)?;
            }
            writeln!(w)?;
        }
        Ok(())
    })?;
    if args.output.format == Format::CsvSvg {
        let svg = render(
            &[Panel {
                title: "Leakage current RMS".into(),
                y_label: "A".into(),
                series: outputs
                    .iter()
                    .zip(series)
                    .map(|((kind, _), pts)| Series::new(kind.key(), pts))
                    .collect(),
            }],
            "t [s]",
        );
        let p = out_dir.join("leak_overlay.svg");
        write_file(&p, |w| w.write_all(svg.as_bytes()))?;
    }
    print!("{table}");

    let leak: Vec<f64> = outputs.iter().map(|(_, o)| o.metrics.leak_rms.unwrap_or(f64::NAN)).collect();
    let [mpc, pi_h5, fb] = [leak[0], leak[1], leak[2]];
    if leak.iter().all(|&l| l <= NO_LEAKAGE) {
        println!("leakage ordering: no leakage in any run");
        Ok(())
    } else if mpc < pi_h5 && pi_h5 < fb {
        println!("leakage ordering: mpc_h5 < pi_h5 < pi_full_bridge holds");
        Ok(())
    } else {
        println!("leakage ordering: mpc_h5 < pi_h5 < pi_full_bridge VIOLATED");
        Err(Failure {
            code: 1,
            message: "leakage ordering violated".into(),
        })
    }
}

fn mpp_params(args: &MppArgs) -> Result<PvModelParams> {
    let targets = match &args.scenario {
        Some(path) => {
            let text = read_text(path)?;
            let mut raw =
                RawConfig::parse(&text).map_err(|e| Failure::config(format!("{}: {e}", path.display())))?;
            raw.apply_overrides(&args.output.overrides)
                .map_err(|e| Failure::config(format!("{}: {e}", path.display())))?;
            raw.pv_targets()
                .map_err(|e| Failure::config(format!("{}: {e}", path.display())))?
        }
        None => {
            if !args.output.overrides.is_empty() {
                return Err(Failure::config("--override needs a scenario file"));
            }
            CalibrationTargets::desk_scale()
        }
    };
    calibrate(&targets).map_err(|e| Failure::config(e.to_string()))
}

fn cmd_mppcurve(args: &MppArgs) -> Result<()> {
    let params = mpp_params(args)?;
    let ambient = AmbientCondition::new(args.irradiance, args.temperature)
        .map_err(|e| Failure::config(e.to_string()))?;
    let mpp = mpp_oracle(&params, ambient).map_err(|e| Failure::config(e.to_string()))?;
    let array = params.at(ambient);

    // Rows sit on the oracle grid, so the marked row is the curve maximum.
    let n = (mpp.voc / ORACLE_STEP).floor().max(0.0) as u64;
    let mut rows = Vec::new();
    let mut k = 0;
    while k <= n {
        let v = k as f64 * ORACLE_STEP;
        rows.push((v, array.current(v).map_err(|e| Failure::config(e.to_string()))?));
        k += args.stride;
    }
    if let Err(pos) = rows.binary_search_by(|r| r.0.total_cmp(&mpp.vmpp)) {
        rows.insert(pos, (mpp.vmpp, mpp.impp));
    }

    let out_dir = &args.output.out;
    create_out_dir(out_dir)?;
    let path = out_dir.join("mppcurve.csv");
    write_file(&path, |w| {
        writeln!(w, "v,i,p,mpp")?;
        for &(v, i) in &rows {
            writeln!(w, "{v},{i},{},{}", v * i, u8::from(v == mpp.vmpp))?;
        }
        Ok(())
    })?;
    if args.output.format == Format::CsvSvg {
        let svg = render(
            &[
                Panel {
                    title: "I-V curve".into(),
                    y_label: "A".into(),
                    series: vec![Series::new("i", rows.clone())],
                },
                Panel {
                    title: "P-V curve".into(),
                    y_label: "W".into(),
                    series: vec![
                        Series::new("p", rows.iter().map(|&(v, i)| (v, v * i)).collect()),
                        Series::new("mpp", vec![(mpp.vmpp, 0.0), (mpp.vmpp, mpp.pmax)]),
                    ],
                },
            ],
            "v [V]",
        );
        let p = out_dir.join("mppcurve.svg");
        write_file(&p, |w| w.write_all(svg.as_bytes()))?;
    }
    println!("vmpp: {}", mpp.vmpp);
    println!("impp: {}", mpp.impp);
    println!("pmax: {}", mpp.pmax);
    println!("voc: {}", mpp.voc);
    Ok(())
}

fn cmd_accept() -> Result<()> {
    let results = acceptance::run_all();
    for r in &results {
        println!("{r}");
    }
    let failed = results.iter().filter(|r| !r.passed).count();
    println!("{} of {} criteria passed", results.len() - failed, results.len());
    if failed == 0 {
        Ok(())
    } else {
        Err(Failure {
            code: 1,
            message: format!("{failed} acceptance criteria failed"),
        })
    }
}
