//! Timing optimization: reverse-pulse scans, optimal stopping-pulse curves and
//! direct minimization of the recombination residuals.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::f64::consts::FRAC_PI_2;

use crate::error::{Result, SgiError};
use crate::interferometer::{gaussian_overlap, run, PulseDurations, PulseTimeline};
use crate::spinsys::SpinState;
use crate::wavepacket::{coherence_scales, CoherenceScales, GaussianState};

const US: f64 = 1e-6;
/// Objective value for timelines with a negative duration.
const INFEASIBLE: f64 = 1e30;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FreeParam {
    T2,
    T3,
    T4,
    Td2,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Constraint {
    /// T2 + T3 + Td2 held at its template value; Td2 absorbs the change.
    FixedTotal,
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    /// (dz/l_z)^2 + (dp/l_p)^2
    HdPenalty,
    /// 1 - |<psi1|psi2>|
    OverlapMagnitude,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizationProblem {
    pub template: PulseTimeline,
    pub initial: GaussianState,
    pub free_params: Vec<FreeParam>,
    pub constraint: Constraint,
    pub objective: Objective,
    /// Seed-grid bounds per free parameter (s); default is +-50% of the template value.
    pub seed_bounds: Option<Vec<(f64, f64)>>,
    /// Seed-grid points per free dimension.
    pub grid_points: usize,
    /// Objective above which the configuration is flagged as non-recombinable.
    pub threshold: f64,
}

impl OptimizationProblem {
    pub fn new(template: PulseTimeline, initial: GaussianState, free_params: Vec<FreeParam>) -> Self {
        Self {
            template,
            initial,
            free_params,
            constraint: Constraint::FixedTotal,
            objective: Objective::HdPenalty,
            seed_bounds: None,
            grid_points: 5,
            threshold: 1e-6,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.free_params.is_empty() {
            return Err(SgiError::Config("optimization needs at least one free parameter".into()));
        }
        let mut seen = self.free_params.clone();
        seen.sort_by_key(|p| *p as u8);
        seen.dedup();
        if seen.len() != self.free_params.len() {
            return Err(SgiError::Config("free parameters must be distinct".into()));
        }
        if self.constraint == Constraint::FixedTotal && self.free_params.contains(&FreeParam::Td2) {
            return Err(SgiError::Config("Td2 cannot be free when it absorbs the fixed-total constraint".into()));
        }
        if let Some(b) = &self.seed_bounds {
            if b.len() != self.free_params.len() || b.iter().any(|(lo, hi)| !(hi > lo) || *lo < 0.0) {
                return Err(SgiError::Config("seed bounds must give 0 <= lo < hi per free parameter".into()));
            }
        }
        if self.grid_points < 2 {
            return Err(SgiError::Config("grid_points must be >= 2".into()));
        }
        self.initial.validate()?;
        self.template.durations.validate()
    }

    fn template_value(&self, p: FreeParam) -> f64 {
        let d = &self.template.durations;
        match p {
            FreeParam::T2 => d.t2,
            FreeParam::T3 => d.t3,
            FreeParam::T4 => d.t4,
            FreeParam::Td2 => d.td2,
        }
    }

    fn bounds(&self) -> Vec<(f64, f64)> {
        self.seed_bounds.clone().unwrap_or_else(|| {
            self.free_params
                .iter()
                .map(|&p| {
                    let v = self.template_value(p);
                    if v > 0.0 {
                        (0.5 * v, 1.5 * v)
                    } else {
                        (0.0, US)
                    }
                })
                .collect()
        })
    }

    /// Durations for free-parameter values `x` (s), possibly negative.
    fn raw_durations(&self, x: &[f64]) -> PulseDurations {
        let mut d = self.template.durations;
        let total = d.t2 + d.t3 + d.td2;
        for (p, v) in self.free_params.iter().zip(x) {
            match p {
                FreeParam::T2 => d.t2 = *v,
                FreeParam::T3 => d.t3 = *v,
                FreeParam::T4 => d.t4 = *v,
                FreeParam::Td2 => d.td2 = *v,
            }
        }
        if self.constraint == Constraint::FixedTotal {
            d.td2 = total - d.t2 - d.t3;
        }
        d
    }

    /// Durations for free-parameter values `x` (s); None if any duration is negative.
    pub fn durations_for(&self, x: &[f64]) -> Option<PulseDurations> {
        let d = self.raw_durations(x);
        d.segments().iter().all(|v| *v >= 0.0).then_some(d)
    }

    fn scales(&self) -> CoherenceScales {
        coherence_scales(&self.initial)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Evaluation {
    pub objective: f64,
    pub dz: f64,
    pub dp: f64,
    pub overlap: f64,
}

fn evaluate_durations(problem: &OptimizationProblem, d: PulseDurations) -> Result<Evaluation> {
    let tl = problem.template.with_durations(d)?;
    let rec = run(&tl, &problem.initial, &SpinState::one())?;
    let (dz, dp) = (rec.final_delta_z(), rec.final_delta_p());
    let b1 = rec.branch1.last().expect("record has snapshots");
    let b2 = rec.branch2.last().expect("record has snapshots");
    let overlap = gaussian_overlap(b1, b2).0;
    let s = problem.scales();
    let objective = match problem.objective {
        Objective::HdPenalty => (dz / s.l_z).powi(2) + (dp / s.l_p).powi(2),
        Objective::OverlapMagnitude => 1.0 - overlap,
    };
    Ok(Evaluation { objective, dz, dp, overlap })
}

/// Objective at free-parameter values `x` (s). Infeasible timelines get a large
/// penalty growing with the violation.
pub fn evaluate(problem: &OptimizationProblem, x: &[f64]) -> Result<Evaluation> {
    let d = problem.raw_durations(x);
    let violation: f64 = d.segments().iter().map(|v| (v.min(0.0) / US).powi(2)).sum();
    if violation > 0.0 {
        return Ok(Evaluation { objective: INFEASIBLE * (1.0 + violation), dz: f64::NAN, dp: f64::NAN, overlap: 0.0 });
    }
    evaluate_durations(problem, d)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OptimizationResult {
    pub timeline: PulseTimeline,
    /// optimized free-parameter values (s), in problem order
    pub values: Vec<f64>,
    pub objective: f64,
    pub dz_final: f64,
    pub dp_final: f64,
    pub best_grid_objective: f64,
    pub evaluations: usize,
    pub flags: Vec<String>,
}

/// Deterministic Nelder-Mead; returns (best point, best value, evaluations).
pub fn nelder_mead<F: Fn(&[f64]) -> f64>(
    f: F,
    x0: &[f64],
    step: &[f64],
    xtol: f64,
    max_evals: usize,
) -> (Vec<f64>, f64, usize) {
    let n = x0.len();
    let evals = std::cell::Cell::new(0usize);
    let eval = |x: &[f64]| {
        evals.set(evals.get() + 1);
        f(x)
    };
    let mut simplex: Vec<(Vec<f64>, f64)> = Vec::with_capacity(n + 1);
    simplex.push((x0.to_vec(), eval(x0)));
    for i in 0..n {
        let mut x = x0.to_vec();
        x[i] += step[i];
        let v = eval(&x);
        simplex.push((x, v));
    }
    loop {
        simplex.sort_by(|a, b| a.1.total_cmp(&b.1));
        let size = simplex[1..]
            .iter()
            .map(|(x, _)| x.iter().zip(&simplex[0].0).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max))
            .fold(0.0, f64::max);
        if size < xtol || evals.get() >= max_evals || simplex[0].1 == 0.0 {
            break;
        }
        let centroid: Vec<f64> =
            (0..n).map(|j| simplex[..n].iter().map(|(x, _)| x[j]).sum::<f64>() / n as f64).collect();
        let worst = simplex[n].clone();
        let along = |t: f64| -> Vec<f64> { (0..n).map(|j| centroid[j] + t * (worst.0[j] - centroid[j])).collect() };
        let xr = along(-1.0);
        let fr = eval(&xr);
        if fr < simplex[0].1 {
            let xe = along(-2.0);
            let fe = eval(&xe);
            simplex[n] = if fe < fr { (xe, fe) } else { (xr, fr) };
        } else if fr < simplex[n - 1].1 {
            simplex[n] = (xr, fr);
        } else {
            let (xc, fc) = if fr < worst.1 {
                let x = along(-0.5);
                let v = eval(&x);
                (x, v)
            } else {
                let x = along(0.5);
                let v = eval(&x);
                (x, v)
            };
            if fc < worst.1.min(fr) {
                simplex[n] = (xc, fc);
            } else {
                let best = simplex[0].0.clone();
                for item in simplex.iter_mut().skip(1) {
                    let x: Vec<f64> = (0..n).map(|j| best[j] + 0.5 * (item.0[j] - best[j])).collect();
                    let v = eval(&x);
                    *item = (x, v);
                }
            }
        }
    }
    simplex.sort_by(|a, b| a.1.total_cmp(&b.1));
    let (x, v) = simplex.swap_remove(0);
    (x, v, evals.get())
}

fn grid_points(bounds: &[(f64, f64)], per_dim: usize) -> Vec<Vec<f64>> {
    let total = per_dim.pow(bounds.len() as u32);
    (0..total)
        .map(|mut idx| {
            bounds
                .iter()
                .map(|(lo, hi)| {
                    let i = idx % per_dim;
                    idx /= per_dim;
                    lo + (hi - lo) * i as f64 / (per_dim - 1) as f64
                })
                .collect()
        })
        .collect()
}

/// Evaluate the objective on a grid in parallel, preserving grid order.
pub fn evaluate_grid(problem: &OptimizationProblem, points: &[Vec<f64>]) -> Result<Vec<f64>> {
    points
        .par_iter()
        .map(|x| evaluate(problem, x).map(|e| e.objective))
        .collect()
}

/// Grid-seeded Nelder-Mead minimization of the recombination objective.
pub fn minimize_residuals(problem: &OptimizationProblem) -> Result<OptimizationResult> {
    problem.validate()?;
    let bounds = problem.bounds();
    let grid = grid_points(&bounds, problem.grid_points);
    let values = evaluate_grid(problem, &grid)?;
    let mut order: Vec<usize> = (0..grid.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]).then(a.cmp(&b)));
    let best_grid = values[order[0]];

    // simplex works in microseconds
    let objective_us = |x: &[f64]| {
        let s: Vec<f64> = x.iter().map(|v| v * US).collect();
        evaluate(problem, &s).map(|e| e.objective).unwrap_or(f64::INFINITY)
    };
    let step: Vec<f64> =
        bounds.iter().map(|(lo, hi)| 0.5 * (hi - lo) / (problem.grid_points - 1) as f64 / US).collect();
    let mut best: Option<(Vec<f64>, f64)> = None;
    let mut evaluations = grid.len();
    for &start in order.iter().take(3) {
        let x0: Vec<f64> = grid[start].iter().map(|v| v / US).collect();
        let (mut x, mut fx, n) = nelder_mead(objective_us, &x0, &step, 1e-9, 20_000);
        evaluations += n;
        // restart from the optimum with a fresh simplex to escape collapse
        for _ in 0..2 {
            let small: Vec<f64> = step.iter().map(|s| s * 1e-2).collect();
            let (x2, f2, n2) = nelder_mead(objective_us, &x, &small, 1e-9, 20_000);
            evaluations += n2;
            if f2 < fx {
                x = x2;
                fx = f2;
            } else {
                break;
            }
        }
        if best.as_ref().is_none_or(|b| fx < b.1) {
            best = Some((x, fx));
        }
        if fx < problem.threshold {
            break;
        }
    }
    let (x_us, _) = best.expect("at least one start");
    let mut x: Vec<f64> = x_us.iter().map(|v| v * US).collect();
    let mut eval = evaluate(problem, &x)?;
    if eval.objective > best_grid {
        x = grid[order[0]].clone();
        eval = evaluate(problem, &x)?;
    }
    let mut flags = Vec::new();
    if eval.objective > problem.threshold {
        flags.push("non_recombinable".into());
    }
    let d = problem
        .durations_for(&x)
        .ok_or_else(|| SgiError::Numerical("optimizer returned an infeasible timeline".into()))?;
    Ok(OptimizationResult {
        timeline: problem.template.with_durations(d)?,
        values: x,
        objective: eval.objective,
        dz_final: eval.dz,
        dp_final: eval.dp,
        best_grid_objective: best_grid,
        evaluations,
        flags,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReverseScan {
    /// (T2 + T3 in s, P1)
    pub points: Vec<(f64, f64)>,
    /// readout phase (rad) used for every point
    pub readout_phase: f64,
    /// readout-convention phase and overlap contrast at each point
    pub phases: Vec<f64>,
    pub contrasts: Vec<f64>,
}

/// Scan T2 + T3 (split equally) with T2 + T3 + Td2 fixed, at a readout phase
/// placing the symmetric point T2 + T3 = T1 + T4 on a fringe maximum.
pub fn scan_reverse_pulse(problem: &OptimizationProblem, range: (f64, f64, usize)) -> Result<ReverseScan> {
    let (lo, hi, n) = range;
    if n < 3 || !(hi > lo) || lo < 0.0 {
        return Err(SgiError::Config(format!("reverse scan needs 0 <= lo < hi and n >= 3, got ({lo}, {hi}, {n})")));
    }
    let d0 = problem.template.durations;
    let total = d0.t2 + d0.t3 + d0.td2;
    let at = |x: f64| -> Result<crate::interferometer::RunRecord> {
        let d = PulseDurations { t2: 0.5 * x, t3: 0.5 * x, td2: total - x, ..d0 };
        if d.td2 < 0.0 {
            return Err(SgiError::Config(format!("T2 + T3 = {x} exceeds the fixed total {total}")));
        }
        run(&problem.template.with_durations(d)?, &problem.initial, &SpinState::one())
    };
    let symmetric = at(d0.t1 + d0.t4)?;
    let readout = FRAC_PI_2 - symmetric.final_phase;
    let xs: Vec<f64> = (0..n).map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64).collect();
    let records: Vec<Result<(f64, f64, f64)>> = xs
        .par_iter()
        .map(|&x| at(x).map(|r| (r.population1(readout), r.final_phase, r.final_contrast)))
        .collect();
    let mut points = Vec::with_capacity(n);
    let mut phases = Vec::with_capacity(n);
    let mut contrasts = Vec::with_capacity(n);
    for (x, r) in xs.iter().zip(records) {
        let (p, ph, c) = r?;
        points.push((*x, p));
        phases.push(ph);
        contrasts.push(c);
    }
    Ok(ReverseScan { points, readout_phase: readout, phases, contrasts })
}

/// Least-squares quadratic (k0, k1, k2) through unwrapped phases, for use as a fit hint.
pub fn phase_polynomial_hint(xs: &[f64], phases: &[f64]) -> Option<[f64; 3]> {
    if xs.len() < 3 || xs.len() != phases.len() {
        return None;
    }
    let mut unwrapped = Vec::with_capacity(phases.len());
    let mut offset = 0.0;
    for (i, &p) in phases.iter().enumerate() {
        if i > 0 {
            let prev = phases[i - 1];
            let jump = p - prev;
            offset -= (jump / (2.0 * std::f64::consts::PI)).round() * 2.0 * std::f64::consts::PI;
        }
        unwrapped.push(p + offset);
    }
    let poly = polyfit(xs, &unwrapped, 2)?;
    Some([poly.coefficients[0], poly.coefficients[1], poly.coefficients[2]])
}

/// Polynomial in ascending powers of x (SI units).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Polynomial {
    pub coefficients: Vec<f64>,
}

impl Polynomial {
    pub fn eval(&self, x: f64) -> f64 {
        self.coefficients.iter().rev().fold(0.0, |acc, c| acc * x + c)
    }
}

/// Least-squares polynomial of degree `degree` through (xs, ys).
pub fn polyfit(xs: &[f64], ys: &[f64], degree: usize) -> Option<Polynomial> {
    if xs.len() < degree + 1 || xs.len() != ys.len() {
        return None;
    }
    let lo = xs.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let (mid, half) = if hi > lo { (0.5 * (lo + hi), 0.5 * (hi - lo)) } else { (lo, 1.0) };
    let k = degree + 1;
    let a = nalgebra::DMatrix::from_fn(xs.len(), k, |i, j| ((xs[i] - mid) / half).powi(j as i32));
    let b = nalgebra::DVector::from_column_slice(ys);
    let svd = a.svd(true, true);
    let c = svd.solve(&b, 1e-13).ok()?;
    // expand sum c_j ((x - mid)/half)^j into powers of x
    let mut out = vec![0.0; k];
    for (j, cj) in c.iter().enumerate() {
        // (x - mid)^j / half^j
        let mut binom = 1.0;
        for i in 0..=j {
            if i > 0 {
                binom = binom * (j - i + 1) as f64 / i as f64;
            }
            out[i] += cj * binom * (-mid).powi((j - i) as i32) / half.powi(j as i32);
        }
    }
    Some(Polynomial { coefficients: out })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct T2Curve {
    /// (Td1, optimal T2) in seconds
    pub samples: Vec<(f64, f64)>,
    pub polynomial: Polynomial,
    pub flags: Vec<String>,
}

fn visibility(problem: &OptimizationProblem, d: PulseDurations) -> Result<f64> {
    Ok(evaluate_durations(problem, d)?.overlap)
}

/// T2 maximizing the final overlap at fixed Td1: coarse scan, then golden
/// section. In a full loop the delays are linked (Td2 = Td1) and the reverse
/// pulse is symmetric (T3 = T2).
pub fn optimal_t2(problem: &OptimizationProblem, td1: f64) -> Result<(f64, bool)> {
    let full_loop = problem.template.durations.t3 > 0.0;
    let base = PulseDurations { td1, ..problem.template.durations };
    let f = |t2: f64| {
        let d = if full_loop { PulseDurations { t2, t3: t2, td2: td1, ..base } } else { PulseDurations { t2, ..base } };
        visibility(problem, d)
    };
    let center = if base.t2 > 0.0 { base.t2 } else { base.t1 };
    let mut half = 0.5 * center;
    for _ in 0..4 {
        let (lo, hi) = ((center - half).max(0.0), center + half);
        let n = 41;
        let xs: Vec<f64> = (0..n).map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64).collect();
        let vs: Vec<f64> = xs.par_iter().map(|&x| f(x)).collect::<Result<Vec<_>>>()?;
        let imax = (0..n).fold(0, |b, i| if vs[i] > vs[b] { i } else { b });
        if (imax == 0 && lo > 0.0) || imax == n - 1 {
            half *= 2.0;
            continue;
        }
        let (mut a, mut b) = (xs[imax.saturating_sub(1)], xs[(imax + 1).min(n - 1)]);
        let r = 0.5 * (5f64.sqrt() - 1.0);
        let mut c = b - r * (b - a);
        let mut d = a + r * (b - a);
        let (mut fc, mut fd) = (f(c)?, f(d)?);
        while b - a > 1e-14 {
            if fc > fd {
                b = d;
                d = c;
                fd = fc;
                c = b - r * (b - a);
                fc = f(c)?;
            } else {
                a = c;
                c = d;
                fc = fd;
                d = a + r * (b - a);
                fd = f(d)?;
            }
        }
        let unimodal = vs[..=imax].windows(2).all(|w| w[1] >= w[0] - 1e-12)
            && vs[imax..].windows(2).all(|w| w[1] <= w[0] + 1e-12);
        return Ok((0.5 * (a + b), unimodal));
    }
    Err(SgiError::Numerical(format!("no interior visibility maximum for Td1 = {td1}")))
}

/// Optimal T2 at each Td1 sample and a least-squares polynomial through them.
pub fn optimal_t2_curve(problem: &OptimizationProblem, td1_samples: &[f64], poly_degree: usize) -> Result<T2Curve> {
    if td1_samples.len() < poly_degree + 1 {
        return Err(SgiError::Config(format!(
            "degree {poly_degree} needs at least {} Td1 samples",
            poly_degree + 1
        )));
    }
    let mut samples = Vec::with_capacity(td1_samples.len());
    let mut flags = Vec::new();
    for &td1 in td1_samples {
        let (t2, unimodal) = optimal_t2(problem, td1)?;
        if !unimodal {
            flags.push(format!("non_unimodal(Td1={td1:e})"));
        }
        samples.push((td1, t2));
    }
    let (xs, ys): (Vec<f64>, Vec<f64>) = samples.iter().copied().unzip();
    let polynomial = polyfit(&xs, &ys, poly_degree)
        .ok_or_else(|| SgiError::Numerical("polynomial fit of optimal T2 failed".into()))?;
    Ok(T2Curve { samples, polynomial, flags })
}
