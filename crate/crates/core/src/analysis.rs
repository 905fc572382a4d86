//! Least-squares fringe fitting and coherence-scale extraction.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

use crate::error::{Result, SgiError};

/// Cosine criterion max_j |J_j . r| / (|J_j| |r|) for declaring convergence.
pub const GRADIENT_TOL: f64 = 1e-6;

/// RMS residual below which a fit counts as converged regardless of the gradient.
pub const RESIDUAL_FLOOR: f64 = 1e-9;
const MAX_ITER: usize = 500;

/// Model value at `x` for parameters `p`, writing d/dp into `grad`.
pub type ModelFn<'a> = dyn Fn(&[f64], f64, &mut [f64]) -> f64 + Sync + 'a;

#[derive(Debug, Clone, PartialEq)]
pub struct LmOutcome {
    pub params: Vec<f64>,
    /// 0.5 * sum r^2
    pub cost: f64,
    pub converged: bool,
    pub iterations: usize,
    /// J^T J at the returned point
    pub normal_matrix: DMatrix<f64>,
    pub gradient_cosine: f64,
}

fn residuals_and_jacobian(model: &ModelFn, p: &[f64], xs: &[f64], ys: &[f64]) -> (DVector<f64>, DMatrix<f64>) {
    let n = xs.len();
    let k = p.len();
    let mut r = DVector::zeros(n);
    let mut j = DMatrix::zeros(n, k);
    let mut g = vec![0.0; k];
    for i in 0..n {
        r[i] = model(p, xs[i], &mut g) - ys[i];
        for c in 0..k {
            j[(i, c)] = g[c];
        }
    }
    (r, j)
}

fn cost_at(model: &ModelFn, p: &[f64], xs: &[f64], ys: &[f64]) -> f64 {
    let mut g = vec![0.0; p.len()];
    0.5 * xs.iter().zip(ys).map(|(x, y)| (model(p, *x, &mut g) - y).powi(2)).sum::<f64>()
}

fn gradient_cosine(r: &DVector<f64>, j: &DMatrix<f64>) -> f64 {
    let rn = r.norm();
    if rn == 0.0 {
        return 0.0;
    }
    let g = j.transpose() * r;
    (0..j.ncols())
        .map(|c| {
            let cn = j.column(c).norm();
            if cn == 0.0 {
                0.0
            } else {
                g[c].abs() / (cn * rn)
            }
        })
        .fold(0.0, f64::max)
}

/// Levenberg-Marquardt with Marquardt diagonal scaling.
pub fn levenberg_marquardt(model: &ModelFn, xs: &[f64], ys: &[f64], p0: &[f64]) -> LmOutcome {
    let k = p0.len();
    let mut p = p0.to_vec();
    let (mut r, mut j) = residuals_and_jacobian(model, &p, xs, ys);
    let mut cost = 0.5 * r.norm_squared();
    let mut jtj = j.transpose() * &j;
    let mut lambda = 1e-3;
    let mut iterations = 0;
    let perfect = |c: f64| c <= 1e-30 * xs.len() as f64;
    while iterations < MAX_ITER {
        if gradient_cosine(&r, &j) < GRADIENT_TOL * 1e-3 || perfect(cost) {
            break;
        }
        iterations += 1;
        let g = j.transpose() * &r;
        let dmax = (0..k).map(|i| jtj[(i, i)]).fold(0.0, f64::max).max(1e-300);
        let mut accepted = false;
        while lambda < 1e16 {
            let mut a = jtj.clone();
            for i in 0..k {
                a[(i, i)] += lambda * jtj[(i, i)].max(1e-12 * dmax);
            }
            let Some(delta) = a.cholesky().map(|c| c.solve(&(-&g))) else {
                lambda *= 4.0;
                continue;
            };
            let trial: Vec<f64> = p.iter().zip(delta.iter()).map(|(a, b)| a + b).collect();
            let trial_cost = cost_at(model, &trial, xs, ys);
            if trial_cost.is_finite() && trial_cost < cost {
                let step_small = delta.iter().zip(&p).all(|(d, v)| d.abs() <= 1e-15 * v.abs().max(1e-300));
                let gain = cost - trial_cost;
                p = trial;
                (r, j) = residuals_and_jacobian(model, &p, xs, ys);
                cost = 0.5 * r.norm_squared();
                jtj = j.transpose() * &j;
                lambda = (lambda / 3.0).max(1e-12);
                accepted = !(step_small || gain <= 1e-16 * cost);
                break;
            }
            lambda *= 4.0;
        }
        if !accepted {
            break;
        }
    }
    let cosine = gradient_cosine(&r, &j);
    // at the rounding floor the gradient direction is noise
    let at_floor = (2.0 * cost / xs.len().max(1) as f64).sqrt() <= RESIDUAL_FLOOR;
    LmOutcome {
        params: p,
        cost,
        converged: cosine < GRADIENT_TOL || perfect(cost) || at_floor,
        iterations,
        normal_matrix: jtj,
        gradient_cosine: cosine,
    }
}

/// Central-difference Jacobian row of `model` at (p, x).
pub fn finite_difference_gradient(model: &ModelFn, p: &[f64], x: f64) -> Vec<f64> {
    let mut scratch = vec![0.0; p.len()];
    (0..p.len())
        .map(|i| {
            let h = 1e-6 * p[i].abs().max(1e-3);
            let mut up = p.to_vec();
            let mut dn = p.to_vec();
            up[i] += h;
            dn[i] -= h;
            (model(&up, x, &mut scratch) - model(&dn, x, &mut scratch)) / (2.0 * h)
        })
        .collect()
}

/// Linearized covariance s^2 (J^T J)^-1 with s^2 = sum r^2 / (n - k).
fn covariance(outcome: &LmOutcome, n: usize) -> DMatrix<f64> {
    let k = outcome.params.len();
    let dof = (n.saturating_sub(k)).max(1) as f64;
    let s2 = 2.0 * outcome.cost / dof;
    let svd = outcome.normal_matrix.clone().svd(true, true);
    let cutoff = 1e-14 * svd.singular_values.max();
    let inv = svd
        .pseudo_inverse(cutoff)
        .unwrap_or_else(|_| DMatrix::zeros(k, k));
    inv * s2
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitParam {
    pub name: String,
    pub value: f64,
    pub stderr: f64,
    pub fixed: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FitModel {
    /// 0.5 C sin(x + phi0) + c
    Sine,
    /// A exp(-((x - x0)/tau)^2 / 2) sin(phi0 + k1 x + k2 x^2) + c
    GaussianSine,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub model: FitModel,
    pub params: Vec<FitParam>,
    /// Covariance of `params` in the same order (zero rows for fixed parameters).
    pub covariance: Vec<Vec<f64>>,
    pub residual_rms: f64,
    pub converged: bool,
    pub flags: Vec<String>,
}

impl FitResult {
    pub fn get(&self, name: &str) -> Option<f64> {
        self.params.iter().find(|p| p.name == name).map(|p| p.value)
    }

    pub fn stderr(&self, name: &str) -> Option<f64> {
        self.params.iter().find(|p| p.name == name).map(|p| p.stderr)
    }

    pub fn has_flag(&self, flag: &str) -> bool {
        self.flags.iter().any(|f| f == flag)
    }

    /// Model prediction at `x` from the fitted parameters.
    pub fn evaluate(&self, x: f64) -> f64 {
        let v = |n: &str| self.get(n).unwrap_or(0.0);
        match self.model {
            FitModel::Sine => 0.5 * v("C") * (x + v("phi0")).sin() + v("c"),
            FitModel::GaussianSine => {
                let w = (x - v("x0")) / v("tau");
                v("A") * (-0.5 * w * w).exp() * (v("phi0") + v("k1") * x + v("k2") * x * x).sin() + v("c")
            }
        }
    }
}

fn check_data(data: &[(f64, f64)], min: usize) -> Result<()> {
    if data.len() < min {
        return Err(SgiError::Config(format!("fit needs at least {min} points, got {}", data.len())));
    }
    if data.iter().any(|(x, y)| !x.is_finite() || !y.is_finite()) {
        return Err(SgiError::Domain("fit data contains non-finite values".into()));
    }
    Ok(())
}

fn rms(model: &ModelFn, p: &[f64], xs: &[f64], ys: &[f64]) -> f64 {
    (2.0 * cost_at(model, p, xs, ys) / xs.len() as f64).sqrt()
}

fn sine_model(p: &[f64], x: f64, g: &mut [f64]) -> f64 {
    let (s, c) = (x + p[1]).sin_cos();
    g[0] = 0.5 * s;
    g[1] = 0.5 * p[0] * c;
    g[2] = 1.0;
    0.5 * p[0] * s + p[2]
}

/// Solve the small normal equations for a linear least-squares basis.
fn linear_lsq(columns: &[Vec<f64>], ys: &[f64]) -> Option<(Vec<f64>, f64)> {
    let n = ys.len();
    let k = columns.len();
    let a = DMatrix::from_fn(n, k, |i, j| columns[j][i]);
    let b = DVector::from_column_slice(ys);
    let svd = a.clone().svd(true, true);
    let coef = svd.solve(&b, 1e-12 * svd.singular_values.max()).ok()?;
    let res = (&a * &coef - &b).norm_squared();
    Some((coef.iter().copied().collect(), res))
}

/// Fit P = 0.5 C sin(phi + phi0) + c.
pub fn fit_sine(data: &[(f64, f64)]) -> Result<FitResult> {
    check_data(data, 4)?;
    let (xs, ys): (Vec<f64>, Vec<f64>) = data.iter().copied().unzip();
    let span = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max) - xs.iter().cloned().fold(f64::INFINITY, f64::min);
    if !(span > PI) {
        return Err(SgiError::Config(format!("phase scan must span more than half a period, got {span} rad")));
    }
    // quadrature projection: P = alpha sin(phi) + beta cos(phi) + c
    let cols = vec![
        xs.iter().map(|x| x.sin()).collect(),
        xs.iter().map(|x| x.cos()).collect(),
        vec![1.0; xs.len()],
    ];
    let (lin, _) = linear_lsq(&cols, &ys).ok_or_else(|| SgiError::Numerical("singular sine design".into()))?;
    let p0 = [2.0 * lin[0].hypot(lin[1]), lin[1].atan2(lin[0]), lin[2]];
    let out = levenberg_marquardt(&sine_model, &xs, &ys, &p0);
    let mut p = out.params.clone();
    let cov = covariance(&out, xs.len());
    if p[0] < 0.0 {
        p[0] = -p[0];
        p[1] += PI;
    }
    p[1] = p[1].rem_euclid(2.0 * PI);
    let mut flags = Vec::new();
    let se: Vec<f64> = (0..3).map(|i| cov[(i, i)].max(0.0).sqrt()).collect();
    let epsilon = (3.0 * se[0]).max(1e-9);
    if p[0] > 1.0 + epsilon {
        flags.push(format!("C_clipped(epsilon={epsilon:.3e})"));
        p[0] = 1.0 + epsilon;
    }
    if !out.converged {
        flags.push("not_converged".into());
    }
    let names = ["C", "phi0", "c"];
    Ok(FitResult {
        model: FitModel::Sine,
        params: (0..3)
            .map(|i| FitParam { name: names[i].into(), value: p[i], stderr: se[i], fixed: false })
            .collect(),
        covariance: (0..3).map(|i| (0..3).map(|j| cov[(i, j)]).collect()).collect(),
        residual_rms: rms(&sine_model, &p, &xs, &ys),
        converged: out.converged,
        flags,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EnvelopeCenter {
    /// envelope centred at the given x
    Fixed(f64),
    Free,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QuadraticPhase {
    Free,
    Fixed(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GaussianSineConfig {
    pub envelope: EnvelopeCenter,
    pub k2: QuadraticPhase,
    /// Starting guess for (k1, k2), e.g. from the simulator's phase polynomial.
    pub phase_hint: Option<(f64, f64)>,
}

impl Default for GaussianSineConfig {
    fn default() -> Self {
        Self { envelope: EnvelopeCenter::Fixed(0.0), k2: QuadraticPhase::Free, phase_hint: None }
    }
}

/// A tau larger than this multiple of the data span is reported as unbounded.
pub const TAU_UNBOUNDED_SPAN: f64 = 5.0;

const GS_NAMES: [&str; 7] = ["A", "tau", "x0", "phi0", "k1", "k2", "c"];

/// Gaussian-sine model on scaled abscissa u; full vector [A, t, u0, phi, k1, k2, c].
fn gs_full(p: &[f64; 7], u: f64, g: &mut [f64; 7]) -> f64 {
    let w = (u - p[2]) / p[1];
    let e = (-0.5 * w * w).exp();
    let psi = p[3] + p[4] * u + p[5] * u * u;
    let (s, c) = psi.sin_cos();
    let aes = p[0] * e * s;
    let aec = p[0] * e * c;
    g[0] = e * s;
    g[1] = aes * w * w / p[1];
    g[2] = aes * w / p[1];
    g[3] = aec;
    g[4] = aec * u;
    g[5] = aec * u * u;
    g[6] = 1.0;
    aes + p[6]
}

struct Scaling {
    mid: f64,
    half: f64,
}

impl Scaling {
    fn u(&self, x: f64) -> f64 {
        (x - self.mid) / self.half
    }

    /// Map scaled parameters to x units and return the Jacobian of that map.
    fn to_x(&self, q: &[f64; 7]) -> ([f64; 7], DMatrix<f64>) {
        let (m, s) = (self.mid, self.half);
        let out = [
            q[0],
            s * q[1],
            m + s * q[2],
            q[3] - q[4] * m / s + q[5] * m * m / (s * s),
            q[4] / s - 2.0 * q[5] * m / (s * s),
            q[5] / (s * s),
            q[6],
        ];
        let mut t = DMatrix::zeros(7, 7);
        t[(0, 0)] = 1.0;
        t[(1, 1)] = s;
        t[(2, 2)] = s;
        t[(3, 3)] = 1.0;
        t[(3, 4)] = -m / s;
        t[(3, 5)] = m * m / (s * s);
        t[(4, 4)] = 1.0 / s;
        t[(4, 5)] = -2.0 * m / (s * s);
        t[(5, 5)] = 1.0 / (s * s);
        t[(6, 6)] = 1.0;
        (out, t)
    }

    /// Scaled (k1, k2) for x-unit (k1, k2).
    fn phase_to_u(&self, k1: f64, k2: f64) -> (f64, f64) {
        (k1 * self.half + 2.0 * k2 * self.mid * self.half, k2 * self.half * self.half)
    }
}

struct Candidate {
    q: [f64; 7],
    residual: f64,
}

/// Variable projection: best (A, phi, c) for fixed (t, u0, k1, k2).
fn project(us: &[f64], ys: &[f64], t: f64, u0: f64, k1: f64, k2: f64) -> Option<Candidate> {
    let mut c0 = Vec::with_capacity(us.len());
    let mut c1 = Vec::with_capacity(us.len());
    for &u in us {
        let w = (u - u0) / t;
        let e = (-0.5 * w * w).exp();
        let (s, c) = (k1 * u + k2 * u * u).sin_cos();
        c0.push(e * s);
        c1.push(e * c);
    }
    let (lin, res) = linear_lsq(&[c0, c1, vec![1.0; us.len()]], ys)?;
    let a = lin[0].hypot(lin[1]);
    Some(Candidate { q: [a, t, u0, lin[1].atan2(lin[0]), k1, k2, lin[2]], residual: res })
}

fn periodogram_peaks(us: &[f64], ys: &[f64], k2: f64, count: usize) -> Vec<f64> {
    let n = us.len();
    let mean = ys.iter().sum::<f64>() / n as f64;
    let kmax = 0.9 * PI * (n as f64 - 1.0) / 2.0;
    let m = 4 * n;
    let power: Vec<(f64, f64)> = (0..=m)
        .map(|i| {
            let k = kmax * i as f64 / m as f64;
            let (mut s, mut c) = (0.0, 0.0);
            for (u, y) in us.iter().zip(ys) {
                let (sn, cs) = (k * u + k2 * u * u).sin_cos();
                s += (y - mean) * sn;
                c += (y - mean) * cs;
            }
            (k, s * s + c * c)
        })
        .collect();
    let mut peaks: Vec<(f64, f64)> = (0..power.len())
        .filter(|&i| {
            let left = if i == 0 { 0.0 } else { power[i - 1].1 };
            let right = power.get(i + 1).map_or(0.0, |v| v.1);
            power[i].1 >= left && power[i].1 >= right
        })
        .map(|i| power[i])
        .collect();
    peaks.sort_by(|a, b| b.1.total_cmp(&a.1));
    peaks.into_iter().take(count).map(|p| p.0).collect()
}

/// Fit A exp(-((x - x0)/tau)^2/2) sin(phi0 + k1 x + k2 x^2) + c.
pub fn fit_gaussian_sine(data: &[(f64, f64)], config: &GaussianSineConfig) -> Result<FitResult> {
    check_data(data, 8)?;
    let (xs, ys): (Vec<f64>, Vec<f64>) = data.iter().copied().unzip();
    let lo = xs.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !(hi > lo) {
        return Err(SgiError::Config("fit abscissa has zero span".into()));
    }
    let scaling = Scaling { mid: 0.5 * (lo + hi), half: 0.5 * (hi - lo) };
    let us: Vec<f64> = xs.iter().map(|&x| scaling.u(x)).collect();

    let mut free = [true; 7];
    let mut fixed_u0 = None;
    if let EnvelopeCenter::Fixed(x0) = config.envelope {
        free[2] = false;
        fixed_u0 = Some(scaling.u(x0));
    }
    let mut fixed_k2 = None;
    if let QuadraticPhase::Fixed(k2) = config.k2 {
        free[5] = false;
        fixed_k2 = Some(scaling.phase_to_u(0.0, k2).1);
    }
    let hint = config.phase_hint.map(|(k1, k2)| scaling.phase_to_u(k1, fixed_k2.map_or(k2, |_| config.k2_value())));
    let k2_init = fixed_k2.or(hint.map(|h| h.1)).unwrap_or(0.0);

    let k1_values: Vec<f64> = match hint {
        Some((k1, _)) => vec![k1],
        None => periodogram_peaks(&us, &ys, k2_init, 3),
    };
    let t_values: Vec<f64> = (0..16).map(|i| 0.05 * (200f64).powf(i as f64 / 15.0)).collect();
    let u0_values: Vec<f64> = match fixed_u0 {
        Some(u0) => vec![u0],
        None => (0..11).map(|i| -1.0 + 0.2 * i as f64).collect(),
    };
    let mut candidates: Vec<Candidate> = Vec::new();
    for &k1 in &k1_values {
        for &t in &t_values {
            for &u0 in &u0_values {
                if let Some(c) = project(&us, &ys, t, u0, k1, k2_init) {
                    candidates.push(c);
                }
            }
        }
    }
    candidates.sort_by(|a, b| a.residual.total_cmp(&b.residual));
    if candidates.is_empty() {
        return Err(SgiError::Numerical("no usable starting point for Gaussian-sine fit".into()));
    }

    let free_idx: Vec<usize> = (0..7).filter(|&i| free[i]).collect();
    let fit_from = |start: &[f64; 7]| {
        let base = *start;
        let idx = free_idx.clone();
        let model = move |p: &[f64], u: f64, g: &mut [f64]| {
            let mut full = base;
            for (k, &i) in idx.iter().enumerate() {
                full[i] = p[k];
            }
            let mut gf = [0.0; 7];
            let v = gs_full(&full, u, &mut gf);
            for (k, &i) in idx.iter().enumerate() {
                g[k] = gf[i];
            }
            v
        };
        let p0: Vec<f64> = free_idx.iter().map(|&i| start[i]).collect();
        let out = levenberg_marquardt(&model, &us, &ys, &p0);
        let mut full = base;
        for (k, &i) in free_idx.iter().enumerate() {
            full[i] = out.params[k];
        }
        (full, out)
    };

    let mut best: Option<([f64; 7], LmOutcome)> = None;
    for cand in candidates.iter().take(5) {
        let (full, out) = fit_from(&cand.q);
        let better = best.as_ref().is_none_or(|(_, b)| out.cost < b.cost);
        let converged = out.converged;
        if better {
            best = Some((full, out));
        }
        if converged {
            break;
        }
    }
    let (mut q, out) = best.expect("at least one candidate");
    if q[0] < 0.0 {
        q[0] = -q[0];
        q[3] += PI;
    }
    q[1] = q[1].abs();

    let cov_free = covariance(&out, us.len());
    let mut cov_u = DMatrix::zeros(7, 7);
    for (a, &i) in free_idx.iter().enumerate() {
        for (b, &j) in free_idx.iter().enumerate() {
            cov_u[(i, j)] = cov_free[(a, b)];
        }
    }
    let (mut px, t) = scaling.to_x(&q);
    px[3] = px[3].rem_euclid(2.0 * PI);
    let cov_x = &t * cov_u * t.transpose();
    let mut flags = Vec::new();
    if !out.converged {
        flags.push("not_converged".into());
    }
    if px[1] > TAU_UNBOUNDED_SPAN * (hi - lo) {
        flags.push("tau_unbounded".into());
    }
    let params = (0..7)
        .map(|i| FitParam { name: GS_NAMES[i].into(), value: px[i], stderr: cov_x[(i, i)].max(0.0).sqrt(), fixed: !free[i] })
        .collect();
    let mut g = [0.0; 7];
    let residual_rms =
        (us.iter().zip(&ys).map(|(u, y)| (gs_full(&q, *u, &mut g) - y).powi(2)).sum::<f64>() / us.len() as f64).sqrt();
    Ok(FitResult {
        model: FitModel::GaussianSine,
        params,
        covariance: (0..7).map(|i| (0..7).map(|j| cov_x[(i, j)]).collect()).collect(),
        residual_rms,
        converged: out.converged,
        flags,
    })
}

impl GaussianSineConfig {
    fn k2_value(&self) -> f64 {
        match self.k2 {
            QuadraticPhase::Fixed(v) => v,
            QuadraticPhase::Free => 0.0,
        }
    }
}

/// l_z = a T1^2 + a T1 tau
pub fn extract_lz(a: f64, t1: f64, tau: f64) -> Result<f64> {
    if !(a > 0.0 && t1 > 0.0 && tau >= 0.0) {
        return Err(SgiError::Domain(format!("extract_lz needs a, T1 > 0 and tau >= 0, got ({a}, {t1}, {tau})")));
    }
    Ok(a * t1 * t1 + a * t1 * tau)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LpEstimate {
    /// momentum coherence width (kg m/s)
    pub l_p: f64,
    /// velocity width at the 1/sqrt(e) point (m/s)
    pub velocity_width: f64,
    pub fit: FitResult,
    pub flags: Vec<String>,
}

/// Fit a single-kick scan (delta_v in m/s, P1) with a Gaussian envelope centred
/// at zero kick and return l_p = m * velocity width.
pub fn extract_lp(scan: &[(f64, f64)], mass: f64, config: &GaussianSineConfig) -> Result<LpEstimate> {
    if !(mass > 0.0) {
        return Err(SgiError::Domain("mass must be positive".into()));
    }
    let fit = fit_gaussian_sine(scan, config)?;
    let width = fit.get("tau").unwrap_or(f64::NAN);
    let reach = scan.iter().map(|(v, _)| v.abs()).fold(0.0, f64::max);
    let mut flags = fit.flags.clone();
    if !(width < reach) || fit.has_flag("tau_unbounded") {
        flags.push("insufficient_span".into());
    }
    Ok(LpEstimate { l_p: mass * width, velocity_width: width, fit, flags })
}
