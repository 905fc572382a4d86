//! Runs a parsed scenario and writes its artifacts.

use std::f64::consts::{FRAC_PI_2, PI};
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use serde::Serialize;
use serde_json::json;

use sgi_core::analysis::{
    extract_lp, extract_lz, fit_gaussian_sine, fit_sine, EnvelopeCenter, FitResult, GaussianSineConfig,
    QuadraticPhase,
};
use sgi_core::feasibility::feasibility_report;
use sgi_core::interferometer::{
    build_timeline, interference_phase, jitter_monte_carlo, max_separation, relative_phase, run, run_sampled,
    DelayMode, PulseDurations, PulseTimeline, RunRecord, Scheme,
};
use sgi_core::magnetics::{differential_acceleration, FieldModel};
use sgi_core::optimizer::{
    minimize_residuals, optimal_t2_curve, phase_polynomial_hint, scan_reverse_pulse, FreeParam,
    OptimizationProblem,
};
use sgi_core::spinsys::{SpinLabel, SpinState};
use sgi_core::wavepacket::{coherence_scales, GaussianState};

use crate::error::{CliError, CliResult, ConfigError, ConfigErrorKind};
use crate::output::{artifact_entries, ArtifactSink, Manifest, Series};
use crate::scenario::{FitKind, FitSpec, Format, Parameters, Scenario, ScanSpec, ScanVariable, Setup, Sweep};

#[derive(Debug)]
pub struct RunOutcome {
    pub dir: PathBuf,
    pub artifacts: Vec<PathBuf>,
    /// short human-readable result
    pub summary: String,
}

/// Run `scenario`, writing data files and `manifest.json` into `dir`.
pub fn execute(scenario: &Scenario, dir: &Path, format: Format, command: &str) -> CliResult<RunOutcome> {
    let started = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs_f64()).unwrap_or(0.0);
    let clock = Instant::now();
    let mut sink = ArtifactSink::new(dir, format);
    let summary = match &scenario.parameters {
        Parameters::Simulate { setup, samples_per_segment, fringe_points } => {
            simulate(&mut sink, setup, *samples_per_segment, *fringe_points)?
        }
        Parameters::Scan { setup, scan } => scan_experiment(&mut sink, setup, scan)?,
        Parameters::Optimize { setup, optimize } => {
            let mut problem = OptimizationProblem::new(setup.timeline.clone(), setup.initial, optimize.free.clone());
            problem.constraint = optimize.constraint;
            problem.objective = optimize.objective;
            problem.grid_points = optimize.grid_points;
            problem.threshold = optimize.threshold;
            optimize_experiment(&mut sink, &problem, &optimize.t2_curve, optimize.degree)?
        }
        Parameters::Fit(spec) => fit_experiment(&mut sink, spec)?,
        Parameters::SingleKick { initial, t1, sweep, readout_phase, gravity } => {
            single_kick(&mut sink, initial, *t1, sweep, *readout_phase, *gravity)?
        }
        Parameters::HalfVsFull { setup, sweep, readout_phase } => half_vs_full(&mut sink, setup, sweep, *readout_phase)?,
        Parameters::Jitter { setup, jitter, shots } => {
            let j = jitter_monte_carlo(&setup.timeline, &setup.initial, &SpinState::one(), *jitter, *shots, scenario.seed)?;
            let mut s = Series::new(&["shot", "phase_rad", "contrast"]);
            for (i, (p, c)) in j.phases.iter().zip(&j.contrasts).enumerate() {
                s.push(vec![i as f64, *p, *c]);
            }
            sink.series("jitter", &s)?;
            sink.json(
                "jitter.json",
                &json!({
                    "shots": shots,
                    "phase_std_rad": j.phase_std,
                    "mean_contrast": j.mean_contrast,
                    "nominal_contrast": j.nominal_contrast,
                    "nominal_phase_rad": j.nominal_phase,
                }),
            )?;
            format!(
                "phase std {:.4} rad, averaged contrast {:.4} (single shot {:.4})",
                j.phase_std, j.mean_contrast, j.nominal_contrast
            )
        }
        Parameters::Feasibility(spec) => {
            let r = feasibility_report(&spec.object, &spec.wire, spec.distance, &spec.times)?;
            let mut s = Series::new(&["T_s", "dz_m", "accuracy_ratio", "within_spin_coherence"]);
            for row in &r.splittings {
                s.push(vec![row.t, row.dz, row.accuracy_ratio, if row.within_spin_coherence { 1.0 } else { 0.0 }]);
            }
            sink.series("splittings", &s)?;
            sink.json("feasibility.json", &r)?;
            r.to_table()
        }
    };
    let manifest = Manifest {
        tool: "sgi",
        version: env!("CARGO_PKG_VERSION"),
        core_version: env!("CARGO_PKG_VERSION"),
        command,
        seed: scenario.seed,
        inputs: scenario,
        artifacts: artifact_entries(dir, &sink.written),
        started_unix_s: started,
        wall_time_s: clock.elapsed().as_secs_f64(),
    };
    sink.json("manifest.json", &manifest)?;
    Ok(RunOutcome { dir: dir.to_path_buf(), artifacts: sink.written, summary })
}

fn trajectory(rec: &RunRecord) -> Series {
    let mut s = Series::new(&["t_s", "z1_m", "z2_m", "p1_kgms", "p2_kgms", "dz_m", "dp_kgms", "phase_rad"]);
    for i in 0..rec.times.len() {
        s.push(vec![
            rec.times[i],
            rec.branch1[i].z,
            rec.branch2[i].z,
            rec.branch1[i].p,
            rec.branch2[i].p,
            rec.delta_z[i],
            rec.delta_p[i],
            rec.rel_phase[i],
        ]);
    }
    s
}

fn simulate(sink: &mut ArtifactSink, setup: &Setup, samples: usize, fringe_points: usize) -> CliResult<String> {
    let rec = run_sampled(&setup.timeline, &setup.initial, &SpinState::one(), samples)?;
    sink.series("trajectory", &trajectory(&rec))?;
    let phis: Vec<f64> = (0..fringe_points).map(|i| 2.0 * PI * i as f64 / fringe_points as f64).collect();
    let fringe: Vec<(f64, f64)> = phis.iter().map(|&p| (p, rec.population1(p))).collect();
    sink.series("fringe", &Series::pairs("phi_rad", "P1", &fringe))?;
    let (max_dz, max_dp) = max_separation(&rec)?;
    let poly = |f: fn(&RunRecord, DelayMode) -> sgi_core::Result<_>| f(&rec, DelayMode::Td1).ok();
    sink.json(
        "summary.json",
        &json!({
            "final_contrast": rec.final_contrast,
            "final_phase_rad": rec.final_phase,
            "contrasts": rec.contrasts,
            "overlap_phase_rad": rec.overlap_phase,
            "final_delta_z_m": rec.final_delta_z(),
            "final_delta_p_kgms": rec.final_delta_p(),
            "max_delta_z_m": max_dz,
            "max_delta_p_kgms": max_dp,
            "coherence_scales": coherence_scales(&setup.initial),
            "relative_phase_poly_td1": poly(relative_phase),
            "interference_phase_poly_td1": poly(interference_phase),
            "durations": setup.timeline.durations,
        }),
    )?;
    Ok(format!(
        "contrast {:.6}, phase {:.6} rad, final dz {:.3e} m, dp {:.3e} kg m/s",
        rec.final_contrast,
        rec.final_phase,
        rec.final_delta_z(),
        rec.final_delta_p()
    ))
}

/// Fit config for a delay scan: envelope centred at zero delay, phase
/// coefficients frozen to the simulator's polynomial.
fn delay_fit_config(first: &RunRecord, mode: DelayMode, xs: &[f64], phases: &[f64]) -> GaussianSineConfig {
    // readout phase runs opposite to the overlap phase
    let (k1, k2) = match interference_phase(first, mode) {
        Ok(p) => (-p.coefficient(1), -p.coefficient(2)),
        Err(_) => match phase_polynomial_hint(xs, phases) {
            Some(h) => (h[1], h[2]),
            None => (0.0, 0.0),
        },
    };
    GaussianSineConfig { envelope: EnvelopeCenter::Fixed(0.0), k2: QuadraticPhase::Fixed(k2), phase_hint: Some((k1, k2)) }
}

struct DelaySeries {
    records: Vec<RunRecord>,
}

fn delay_series(tl: &PulseTimeline, init: &GaussianState, xs: &[f64], linked: bool) -> CliResult<DelaySeries> {
    let records = xs
        .iter()
        .map(|&x| {
            let d = PulseDurations { td1: x, td2: if linked { x } else { tl.durations.td2 }, ..tl.durations };
            Ok(run(&tl.with_durations(d)?, init, &SpinState::one())?)
        })
        .collect::<CliResult<Vec<_>>>()?;
    Ok(DelaySeries { records })
}

fn scan_experiment(sink: &mut ArtifactSink, setup: &Setup, scan: &ScanSpec) -> CliResult<String> {
    let xs = scan.sweep.values();
    let col = scan.variable.column();
    let (data, config) = match scan.variable {
        ScanVariable::Phi => {
            let rec = run(&setup.timeline, &setup.initial, &SpinState::one())?;
            let data: Vec<(f64, f64)> = xs.iter().map(|&p| (p, rec.population1(p))).collect();
            sink.series("fringe", &Series::pairs(col, "P1", &data))?;
            if scan.fit {
                let fit = fit_sine(&data)?;
                sink.json("scan_fit.json", &fit)?;
                return Ok(format!("C = {:.6}, phi0 = {:.6} rad", fit.get("C").unwrap_or(f64::NAN), fit.get("phi0").unwrap_or(f64::NAN)));
            }
            return Ok(format!("contrast {:.6}, phase {:.6} rad", rec.final_contrast, rec.final_phase));
        }
        ScanVariable::Td1 | ScanVariable::Td => {
            let linked = scan.variable == ScanVariable::Td;
            let s = delay_series(&setup.timeline, &setup.initial, &xs, linked)?;
            let readout = scan.readout_phase.unwrap_or(0.0);
            let data: Vec<(f64, f64)> = xs.iter().zip(&s.records).map(|(&x, r)| (x, r.population1(readout))).collect();
            let phases: Vec<f64> = s.records.iter().map(|r| r.final_phase).collect();
            let mode = if linked { DelayMode::Linked } else { DelayMode::Td1 };
            (data, delay_fit_config(&s.records[0], mode, &xs, &phases))
        }
        ScanVariable::Reverse => {
            if scan.readout_phase.is_some() {
                return Err(ConfigError::new(
                    ConfigErrorKind::InvalidValue,
                    "scan.readout_phase",
                    "reverse scans place the symmetric point on a fringe maximum; remove readout_phase",
                )
                .into());
            }
            let problem = OptimizationProblem::new(setup.timeline.clone(), setup.initial, vec![FreeParam::T2, FreeParam::T3]);
            let sc = scan_reverse_pulse(&problem, (scan.sweep.from, scan.sweep.to, scan.sweep.points))?;
            let hint = phase_polynomial_hint(&xs, &sc.phases).unwrap_or([0.0; 3]);
            let cfg = GaussianSineConfig {
                envelope: EnvelopeCenter::Free,
                k2: QuadraticPhase::Fixed(hint[2]),
                phase_hint: Some((hint[1], hint[2])),
            };
            (sc.points, cfg)
        }
    };
    sink.series("scan", &Series::pairs(col, "P1", &data))?;
    if !scan.fit {
        return Ok(format!("{} points written", data.len()));
    }
    let fit = fit_gaussian_sine(&data, &config)?;
    sink.json("scan_fit.json", &fit)?;
    Ok(fit_line(&fit))
}

fn fit_line(fit: &FitResult) -> String {
    let parts: Vec<String> = fit.params.iter().map(|p| format!("{} = {:.6e}", p.name, p.value)).collect();
    let mut s = parts.join(", ");
    if !fit.flags.is_empty() {
        s.push_str(&format!(" [flags: {}]", fit.flags.join(", ")));
    }
    s
}

fn optimize_experiment(
    sink: &mut ArtifactSink,
    problem: &OptimizationProblem,
    t2_samples: &[f64],
    degree: usize,
) -> CliResult<String> {
    let r = minimize_residuals(problem)?;
    let names: Vec<String> = problem.free_params.iter().map(|p| format!("{p:?}")).collect();
    let values: serde_json::Map<String, serde_json::Value> =
        names.iter().zip(&r.values).map(|(n, v)| (format!("{n}_s"), json!(v))).collect();
    let mut report = json!({
        "free_values": values,
        "objective": r.objective,
        "dz_final_m": r.dz_final,
        "dp_final_kgms": r.dp_final,
        "best_grid_objective": r.best_grid_objective,
        "evaluations": r.evaluations,
        "flags": r.flags,
        "durations": r.timeline.durations,
    });
    if !t2_samples.is_empty() {
        let curve = optimal_t2_curve(problem, t2_samples, degree)?;
        let mut s = Series::new(&["Td1_s", "T2_opt_s"]);
        for (td, t2) in &curve.samples {
            s.push(vec![*td, *t2]);
        }
        sink.series("t2_curve", &s)?;
        report["t2_curve"] = json!({ "polynomial": curve.polynomial, "flags": curve.flags });
    }
    sink.json("optimize.json", &report)?;
    let pretty: Vec<String> = names.iter().zip(&r.values).map(|(n, v)| format!("{n} = {:.6} us", v * 1e6)).collect();
    Ok(format!("{}, J = {:.3e}{}", pretty.join(", "), r.objective, if r.flags.is_empty() { String::new() } else { format!(" [flags: {}]", r.flags.join(", ")) }))
}

/// (x, P1) pairs from a CSV file: a `P1` column if the header has one,
/// otherwise the first two columns. Headerless files are accepted.
pub fn read_xy(path: &Path) -> CliResult<Vec<(f64, f64)>> {
    let text = std::fs::read_to_string(path).map_err(|e| {
        CliError::Config(ConfigError::new(ConfigErrorKind::Io, "fit.input", format!("cannot read {}: {e}", path.display())))
    })?;
    let bad = |msg: String| CliError::Config(ConfigError::new(ConfigErrorKind::InvalidValue, "fit.input", msg));
    let mut rdr = csv::ReaderBuilder::new().has_headers(false).comment(Some(b'#')).trim(csv::Trim::All).from_reader(text.as_bytes());
    let mut rows = Vec::new();
    for rec in rdr.records() {
        rows.push(rec.map_err(|e| bad(format!("{}: {e}", path.display())))?);
    }
    let Some(first) = rows.first() else { return Err(bad(format!("{} is empty", path.display()))) };
    let header = first.iter().any(|f| f.parse::<f64>().is_err());
    let (xi, yi) = if header {
        let y = first.iter().position(|h| h == "P1").unwrap_or(1);
        let x = if y == 0 { 1 } else { 0 };
        (x, y)
    } else {
        (0, 1)
    };
    let body = if header { &rows[1..] } else { &rows[..] };
    body.iter()
        .enumerate()
        .map(|(i, r)| {
            let line = i + 1 + usize::from(header);
            let get = |k: usize| -> CliResult<f64> {
                r.get(k)
                    .and_then(|f| f.parse().ok())
                    .ok_or_else(|| bad(format!("{} row {line}: expected numbers in columns {} and {}", path.display(), xi + 1, yi + 1)))
            };
            Ok((get(xi)?, get(yi)?))
        })
        .collect()
}

fn fit_experiment(sink: &mut ArtifactSink, spec: &FitSpec) -> CliResult<String> {
    let data = read_xy(&spec.input)?;
    let fit = match spec.model {
        FitKind::Sine => fit_sine(&data)?,
        FitKind::GaussianSine => {
            let cfg = GaussianSineConfig {
                envelope: spec.envelope_center.map_or(EnvelopeCenter::Free, EnvelopeCenter::Fixed),
                k2: spec.k2.map_or(QuadraticPhase::Free, QuadraticPhase::Fixed),
                phase_hint: spec.phase_hint,
            };
            fit_gaussian_sine(&data, &cfg)?
        }
    };
    sink.json("fit.json", &fit)?;
    Ok(fit_line(&fit))
}

fn single_kick(
    sink: &mut ArtifactSink,
    initial: &GaussianState,
    t1: f64,
    sweep: &Sweep,
    readout: Option<f64>,
    gravity: bool,
) -> CliResult<String> {
    let rec = |dv: f64| -> CliResult<RunRecord> {
        let d = PulseDurations { t1, ..Default::default() };
        let mut tl = build_timeline(Scheme::SingleKick, d, FieldModel::calibrated(dv / t1))?;
        tl.gravity = gravity;
        Ok(run(&tl, initial, &SpinState::one())?)
    };
    // zero kick on a fringe maximum unless told otherwise
    let readout = match readout {
        Some(r) => r,
        None => FRAC_PI_2 - rec(0.0)?.final_phase,
    };
    let data = sweep
        .values()
        .into_iter()
        .map(|dv| Ok((dv, rec(dv)?.population1(readout))))
        .collect::<CliResult<Vec<_>>>()?;
    sink.series("single_kick", &Series::pairs("delta_v_m_per_s", "P1", &data))?;
    let cfg = GaussianSineConfig { phase_hint: Some((0.0, 0.0)), ..Default::default() };
    let est = extract_lp(&data, initial.mass, &cfg)?;
    let predicted = coherence_scales(initial).l_p / initial.mass;
    sink.json(
        "lp.json",
        &json!({
            "l_p_kgms": est.l_p,
            "velocity_width_m_per_s": est.velocity_width,
            "predicted_velocity_width_m_per_s": predicted,
            "readout_phase_rad": readout,
            "flags": est.flags,
            "fit": est.fit,
        }),
    )?;
    Ok(format!(
        "l_p/m = {:.4} mm/s (hbar/(m sigma_z) = {:.4} mm/s){}",
        est.velocity_width * 1e3,
        predicted * 1e3,
        if est.flags.is_empty() { String::new() } else { format!(" [flags: {}]", est.flags.join(", ")) }
    ))
}

#[derive(Serialize)]
struct HalfLoopFit<'a> {
    fit: &'a FitResult,
    tau_s: f64,
    relative_acceleration_m_per_s2: f64,
    l_z_from_tau_m: Option<f64>,
    l_z_initial_m: f64,
    tau_predicted_s: f64,
}

fn half_vs_full(sink: &mut ArtifactSink, setup: &Setup, sweep: &Sweep, readout: f64) -> CliResult<String> {
    let d = setup.timeline.durations;
    let field = setup.timeline.field;
    let xs = sweep.values();
    let with_flags = |mut tl: PulseTimeline| {
        tl.gravity = setup.timeline.gravity;
        tl.spin_t2 = setup.timeline.spin_t2;
        tl
    };
    let half = with_flags(build_timeline(Scheme::HalfLoop, PulseDurations { t3: 0.0, t4: 0.0, ..d }, field)?);
    let full_scheme = match setup.timeline.scheme {
        Scheme::HalfLoop | Scheme::SingleKick => Scheme::CurrentInversionA,
        s => s,
    };
    let mut fd = d;
    if fd.t3 == 0.0 && fd.t4 == 0.0 {
        fd.t3 = fd.t2;
        fd.t4 = fd.t1;
    }
    let full = with_flags(build_timeline(full_scheme, fd, field)?);
    let hs = delay_series(&half, &setup.initial, &xs, false)?;
    let fs = delay_series(&full, &setup.initial, &xs, true)?;
    let table = |s: &DelaySeries| {
        let mut t = Series::new(&["Td_s", "contrast", "phase_rad", "P1"]);
        for (x, r) in xs.iter().zip(&s.records) {
            t.push(vec![*x, r.final_contrast, r.final_phase, r.population1(readout)]);
        }
        t
    };
    sink.series("half_loop", &table(&hs))?;
    sink.series("full_loop", &table(&fs))?;

    let data: Vec<(f64, f64)> = xs.iter().zip(&hs.records).map(|(&x, r)| (x, r.population1(readout))).collect();
    let phases: Vec<f64> = hs.records.iter().map(|r| r.final_phase).collect();
    let cfg = delay_fit_config(&hs.records[0], DelayMode::Td1, &xs, &phases);
    let fit = fit_gaussian_sine(&data, &cfg)?;
    let tau = fit.get("tau").unwrap_or(f64::NAN).abs();
    let a = differential_acceleration(&field, 0.0, (SpinLabel::ONE, SpinLabel::TWO), setup.initial.mass)?.abs();
    let l_z = coherence_scales(&setup.initial).l_z;
    let report = HalfLoopFit {
        fit: &fit,
        tau_s: tau,
        relative_acceleration_m_per_s2: a,
        l_z_from_tau_m: extract_lz(a, d.t1, tau).ok(),
        l_z_initial_m: l_z,
        tau_predicted_s: (l_z - a * d.t1 * d.t1) / (a * d.t1),
    };
    sink.json("half_loop_fit.json", &report)?;
    let full_c: Vec<f64> = fs.records.iter().map(|r| r.final_contrast).collect();
    let (lo, hi) = full_c.iter().fold((f64::MAX, f64::MIN), |(l, h), c| (l.min(*c), h.max(*c)));
    Ok(format!(
        "half loop tau = {:.2} us (predicted {:.2} us), full-loop contrast in [{lo:.4}, {hi:.4}]",
        tau * 1e6,
        report.tau_predicted_s * 1e6
    ))
}
