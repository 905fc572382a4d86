//! Pulse timelines, two-branch propagation, contrast models, phases, fringes
//! and shot-to-shot jitter.

use num_complex::Complex64;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::f64::consts::{FRAC_PI_2, PI};

use crate::constants::{G_GRAVITY, HBAR};
use crate::error::{Result, SgiError};
use crate::magnetics::{quadratic_potential, FieldModel};
use crate::spinsys::{rf_rotate, RfEvent, SpinLabel, SpinState};
use crate::wavepacket::{coherence_scales, propagate, CoherenceScales, Drive, GaussianState};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    /// Current signs (+,-,-,+), one pi pulse just before readout.
    CurrentInversionA,
    /// Current signs (+,-,-,+), pi pulses right after the first pi/2 and before readout.
    CurrentInversionB,
    /// All currents positive, pi pulses after Td1 and after T3.
    SpinInversion,
    /// Splitting and stopping only, T3 = T4 = 0.
    HalfLoop,
    /// Splitting pulse only.
    SingleKick,
}

impl Scheme {
    pub const ALL: [Scheme; 5] = [
        Scheme::CurrentInversionA,
        Scheme::CurrentInversionB,
        Scheme::SpinInversion,
        Scheme::HalfLoop,
        Scheme::SingleKick,
    ];

    fn signs(self) -> [f64; 4] {
        match self {
            Scheme::SpinInversion => [1.0; 4],
            _ => [1.0, -1.0, -1.0, 1.0],
        }
    }

    /// Segment boundaries (0 = start, 6 = end) carrying a pi pulse.
    fn pi_boundaries(self) -> Vec<usize> {
        match self {
            Scheme::CurrentInversionA => vec![6],
            Scheme::CurrentInversionB => vec![0, 6],
            Scheme::SpinInversion => vec![2, 4],
            Scheme::HalfLoop | Scheme::SingleKick => vec![],
        }
    }
}

/// Segment durations in seconds. `td0` is the free fall between release and
/// the first pi/2 pulse; it only enters through the initial state.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct PulseDurations {
    pub t1: f64,
    pub t2: f64,
    pub t3: f64,
    pub t4: f64,
    pub td1: f64,
    pub td2: f64,
    pub td0: f64,
}

impl PulseDurations {
    /// All four pulses `pulse` long, both delays `delay` long.
    pub fn symmetric(pulse: f64, delay: f64) -> Self {
        Self { t1: pulse, t2: pulse, t3: pulse, t4: pulse, td1: delay, td2: delay, td0: 0.0 }
    }

    /// Segments in time order: T1, Td1, T2, T3, Td2, T4.
    pub fn segments(&self) -> [f64; 6] {
        [self.t1, self.td1, self.t2, self.t3, self.td2, self.t4]
    }

    pub fn from_segments(s: [f64; 6], td0: f64) -> Self {
        Self { t1: s[0], td1: s[1], t2: s[2], t3: s[3], td2: s[4], t4: s[5], td0 }
    }

    pub fn total(&self) -> f64 {
        self.segments().iter().sum()
    }

    pub fn validate(&self) -> Result<()> {
        let named = [
            ("T1", self.t1),
            ("T2", self.t2),
            ("T3", self.t3),
            ("T4", self.t4),
            ("Td1", self.td1),
            ("Td2", self.td2),
            ("Td0", self.td0),
        ];
        for (name, v) in named {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(SgiError::Config(format!("duration {name} must be >= 0, got {v}")));
            }
        }
        Ok(())
    }
}

/// Index of each gradient pulse within `PulseDurations::segments`.
const PULSE_SEGMENTS: [usize; 4] = [0, 2, 3, 5];

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PulseTimeline {
    pub scheme: Scheme,
    pub durations: PulseDurations,
    pub rf_events: Vec<RfEvent>,
    pub gradient_sign_per_pulse: [f64; 4],
    /// Multiplicative current factor per pulse (1 nominally; perturbed for jitter).
    pub current_scale: [f64; 4],
    pub pi_boundaries: Vec<usize>,
    pub field: FieldModel,
    pub gravity: bool,
    /// Optional spin-coherence time for an exp(-t/T2) visibility envelope.
    pub spin_t2: Option<f64>,
}

impl PulseTimeline {
    pub fn total_time(&self) -> f64 {
        self.durations.total()
    }

    /// Same scheme and field with new durations.
    pub fn with_durations(&self, durations: PulseDurations) -> Result<Self> {
        let mut t = build_timeline(self.scheme, durations, self.field)?;
        t.current_scale = self.current_scale;
        t.gravity = self.gravity;
        t.spin_t2 = self.spin_t2;
        Ok(t)
    }

    pub fn with_field(&self, field: FieldModel) -> Self {
        Self { field, ..self.clone() }
    }

    /// Field amplitude during segment `k`, or None for free evolution.
    fn segment_amplitude(&self, k: usize) -> Option<f64> {
        PULSE_SEGMENTS
            .iter()
            .position(|&s| s == k)
            .map(|i| self.gradient_sign_per_pulse[i] * self.current_scale[i])
    }

    fn boundary_times(&self) -> [f64; 7] {
        let s = self.durations.segments();
        let mut out = [0.0; 7];
        for k in 0..6 {
            out[k + 1] = out[k] + s[k];
        }
        out
    }
}

pub fn build_timeline(scheme: Scheme, durations: PulseDurations, field: FieldModel) -> Result<PulseTimeline> {
    durations.validate()?;
    let mut d = durations;
    match scheme {
        Scheme::HalfLoop => {
            d.t3 = 0.0;
            d.t4 = 0.0;
        }
        Scheme::SingleKick => {
            d.t2 = 0.0;
            d.t3 = 0.0;
            d.t4 = 0.0;
        }
        _ => {}
    }
    let pi_boundaries = scheme.pi_boundaries();
    let mut tl = PulseTimeline {
        scheme,
        durations: d,
        rf_events: Vec::new(),
        gradient_sign_per_pulse: scheme.signs(),
        current_scale: [1.0; 4],
        pi_boundaries,
        field,
        gravity: true,
        spin_t2: None,
    };
    let times = tl.boundary_times();
    let mut events = vec![RfEvent::half_pi(0.0, 0.0)];
    events.extend(tl.pi_boundaries.iter().map(|&b| RfEvent::pi(times[b])));
    events.push(RfEvent::half_pi(times[6], 0.0));
    tl.rf_events = events;
    Ok(tl)
}

/// Contrast of the final state evaluated three ways.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ContrastSummary {
    /// Full readout visibility: spin factor x envelope x |<psi1|psi2>|.
    pub overlap: f64,
    pub hd: f64,
    pub phenomenological: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunRecord {
    pub times: Vec<f64>,
    /// Path-1 snapshots (path 1 starts in |2,1>).
    pub branch1: Vec<GaussianState>,
    pub branch2: Vec<GaussianState>,
    /// z(path 2) - z(path 1)
    pub delta_z: Vec<f64>,
    pub delta_p: Vec<f64>,
    /// centroid phase of path 2 minus path 1
    pub rel_phase: Vec<f64>,
    pub final_contrast: f64,
    /// P1(phi) = 0.5 C sin(phi + final_phase) + 0.5
    pub final_phase: f64,
    pub contrasts: ContrastSummary,
    /// arg <psi(path 1)|psi(path 2)>
    pub overlap_phase: f64,
    pub final_labels: [SpinLabel; 2],
    pub timeline: PulseTimeline,
    pub initial: GaussianState,
    #[serde(skip)]
    readout: Readout,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
struct Readout {
    amps: [Complex64; 2],
    labels: [SpinLabel; 2],
    cross: Complex64,
}

impl Readout {
    /// Population of |1> after the closing pi/2 pulse with phase `phi`.
    fn population1(&self, phi: f64) -> f64 {
        let coupling = |label: SpinLabel| {
            let r = rf_rotate(
                if label == SpinLabel::ONE { SpinState::one() } else { SpinState::two() },
                FRAC_PI_2,
                phi,
            );
            r.amp1
        };
        let b = [
            self.amps[0] * coupling(self.labels[0]),
            self.amps[1] * coupling(self.labels[1]),
        ];
        let cross = b[0].conj() * b[1] * self.cross;
        b[0].norm_sqr() + b[1].norm_sqr() + 2.0 * cross.re
    }
}

impl RunRecord {
    /// Population of |1> after the closing pi/2 pulse with readout phase `phi`.
    pub fn population1(&self, phi: f64) -> f64 {
        self.readout.population1(phi)
    }

    pub fn final_delta_z(&self) -> f64 {
        *self.delta_z.last().unwrap_or(&0.0)
    }

    pub fn final_delta_p(&self) -> f64 {
        *self.delta_p.last().unwrap_or(&0.0)
    }

    pub fn final_rel_phase(&self) -> f64 {
        *self.rel_phase.last().unwrap_or(&0.0)
    }
}

fn wrap_phase(x: f64) -> f64 {
    let y = x.rem_euclid(2.0 * PI);
    if y > PI {
        y - 2.0 * PI
    } else {
        y
    }
}

fn swap_label(l: SpinLabel) -> SpinLabel {
    if l == SpinLabel::ONE {
        SpinLabel::TWO
    } else {
        SpinLabel::ONE
    }
}

/// Apply a pi pulse (phase 0) to a path: its label flips and its amplitude
/// picks up the rotation matrix element.
fn apply_pi(amp: Complex64, label: SpinLabel) -> (Complex64, SpinLabel) {
    let s = if label == SpinLabel::ONE { SpinState::one() } else { SpinState::two() };
    let r = rf_rotate(s, PI, 0.0);
    let factor = if label == SpinLabel::ONE { r.amp2 } else { r.amp1 };
    (amp * factor, swap_label(label))
}

pub fn run(timeline: &PulseTimeline, initial: &GaussianState, initial_spin: &SpinState) -> Result<RunRecord> {
    run_sampled(timeline, initial, initial_spin, 1)
}

/// Like `run`, recording `samples_per_segment` evenly spaced snapshots inside
/// every non-empty segment.
pub fn run_sampled(
    timeline: &PulseTimeline,
    initial: &GaussianState,
    initial_spin: &SpinState,
    samples_per_segment: usize,
) -> Result<RunRecord> {
    initial.validate()?;
    timeline.durations.validate()?;
    let norm = initial_spin.norm_sqr();
    if !(norm > 0.0) {
        return Err(SgiError::Domain("initial spin state has zero norm".into()));
    }
    let samples = samples_per_segment.max(1);
    let split = rf_rotate(*initial_spin, FRAC_PI_2, 0.0);
    let scale = 1.0 / norm.sqrt();
    let mut amps = [split.amp1 * scale, split.amp2 * scale];
    let mut labels = [SpinLabel::ONE, SpinLabel::TWO];
    let mut states = [*initial, *initial];
    let mut t = 0.0;

    let mut rec_t = vec![0.0];
    let mut rec1 = vec![*initial];
    let mut rec2 = vec![*initial];
    let segs = timeline.durations.segments();
    for k in 0..=6 {
        if timeline.pi_boundaries.contains(&k) {
            for path in 0..2 {
                let (a, l) = apply_pi(amps[path], labels[path]);
                amps[path] = a;
                labels[path] = l;
            }
        }
        if k == 6 {
            break;
        }
        let dt = segs[k];
        if dt == 0.0 {
            continue;
        }
        let amplitude = timeline.segment_amplitude(k);
        let h = dt / samples as f64;
        for _ in 0..samples {
            for path in 0..2 {
                let drive = amplitude.map(|a| Drive { field: &timeline.field, spin: labels[path], amplitude: a });
                states[path] = propagate(&states[path], drive.as_ref(), h, timeline.gravity)?;
            }
            t += h;
            rec_t.push(t);
            rec1.push(states[0]);
            rec2.push(states[1]);
        }
    }

    let (mag, phase) = gaussian_overlap(&states[0], &states[1]);
    let envelope = timeline.spin_t2.map_or(1.0, |t2| (-t / t2).exp());
    let cross = Complex64::from_polar(mag * envelope, phase);
    let readout = Readout { amps, labels, cross };
    let k_re = readout.population1(0.0) - 0.5;
    let k_im = readout.population1(FRAC_PI_2) - 0.5;
    let k = Complex64::new(k_re, k_im);
    let final_contrast = 2.0 * k.norm();
    let final_phase = if final_contrast > 0.0 { wrap_phase(FRAC_PI_2 - k.arg()) } else { 0.0 };

    let spin_visibility = 2.0 * (amps[0] * amps[1]).norm();
    let (dz, dp) = (states[1].z - states[0].z, states[1].p - states[0].p);
    let sz = 0.5 * (states[0].sigma_z() + states[1].sigma_z());
    let sp = 0.5 * (states[0].sigma_p() + states[1].sigma_p());
    let scales = coherence_scales(initial);
    let contrasts = ContrastSummary {
        overlap: final_contrast,
        hd: spin_visibility * envelope * hd_contrast(dz, dp, sz, sp),
        phenomenological: spin_visibility * envelope * phenomenological_contrast(dz, dp, &scales),
    };

    let delta_z = rec1.iter().zip(&rec2).map(|(a, b)| b.z - a.z).collect();
    let delta_p = rec1.iter().zip(&rec2).map(|(a, b)| b.p - a.p).collect();
    let rel_phase = rec1.iter().zip(&rec2).map(|(a, b)| b.global_phase - a.global_phase).collect();
    Ok(RunRecord {
        times: rec_t,
        branch1: rec1,
        branch2: rec2,
        delta_z,
        delta_p,
        rel_phase,
        final_contrast,
        final_phase,
        contrasts,
        overlap_phase: phase,
        final_labels: labels,
        timeline: timeline.clone(),
        initial: *initial,
        readout,
    })
}

/// Largest |dz| and |dp| over the recorded snapshots.
pub fn max_separation(record: &RunRecord) -> Result<(f64, f64)> {
    if record.times.is_empty() {
        return Err(SgiError::Domain("empty run record".into()));
    }
    let dz = record.delta_z.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let dp = record.delta_p.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    Ok((dz, dp))
}

/// Gaussian overlap contrast exp[-(dz/sz)^2/8 - (dp/sp)^2/8].
pub fn hd_contrast(dz: f64, dp: f64, sigma_z: f64, sigma_p: f64) -> f64 {
    (-(dz / sigma_z).powi(2) / 8.0 - (dp / sigma_p).powi(2) / 8.0).exp()
}

/// exp[-(dz/l_z)^2/2 - (dp/l_p)^2/2]
pub fn phenomenological_contrast(dz: f64, dp: f64, scales: &CoherenceScales) -> f64 {
    (-0.5 * (dz / scales.l_z).powi(2) - 0.5 * (dp / scales.l_p).powi(2)).exp()
}

/// Magnitude and phase of <s1|s2> for arbitrary complex-width Gaussians.
pub fn gaussian_overlap(s1: &GaussianState, s2: &GaussianState) -> (f64, f64) {
    // integrate in x = z - q1:
    // exponent = -P x^2 + Q x + R
    let a1 = s1.complex_width();
    let a2 = s2.complex_width();
    let d = s2.z - s1.z;
    let i = Complex64::i();
    let p = a1.conj() + a2;
    let q = a2 * (2.0 * d) + i * ((s2.p - s1.p) / HBAR);
    let r = -a2 * (d * d) - i * (s2.p * d / HBAR) + i * (s2.global_phase - s1.global_phase);
    let e = q * q / (p * 4.0) + r;
    let pref = (Complex64::new(PI, 0.0) / p).sqrt();
    let log_norm = 0.25 * ((2.0 * a1.re / PI).ln() + (2.0 * a2.re / PI).ln());
    let magnitude = (log_norm + pref.norm().ln() + e.re).exp().min(1.0);
    let phase = wrap_phase(pref.arg() + e.im);
    (magnitude, phase)
}

/// Linear phase spread F T1 sigma_z / hbar imprinted across the packet by the splitting pulse.
pub fn splitting_phase_spread(force: f64, t1: f64, sigma_z: f64) -> f64 {
    force * t1 * sigma_z / HBAR
}

/// Which delays follow the polynomial variable Td.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DelayMode {
    /// Td1 = Td, Td2 fixed.
    Td1,
    /// Td1 = Td2 = Td.
    Linked,
}

/// Relative phase as a polynomial in Td, coefficients in ascending order.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PhasePolynomial {
    pub coefficients: Vec<f64>,
    pub mode: DelayMode,
}

impl PhasePolynomial {
    pub fn eval(&self, td: f64) -> f64 {
        self.coefficients.iter().rev().fold(0.0, |acc, c| acc * td + c)
    }

    pub fn coefficient(&self, k: usize) -> f64 {
        self.coefficients.get(k).copied().unwrap_or(0.0)
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Poly(Vec<f64>);

impl Poly {
    fn c(v: f64) -> Self {
        Poly(vec![v])
    }
    fn x() -> Self {
        Poly(vec![0.0, 1.0])
    }
    fn add(&self, o: &Poly) -> Poly {
        let n = self.0.len().max(o.0.len());
        Poly((0..n).map(|i| self.0.get(i).unwrap_or(&0.0) + o.0.get(i).unwrap_or(&0.0)).collect())
    }
    fn sub(&self, o: &Poly) -> Poly {
        self.add(&o.scale(-1.0))
    }
    fn scale(&self, s: f64) -> Poly {
        Poly(self.0.iter().map(|v| v * s).collect())
    }
    fn mul(&self, o: &Poly) -> Poly {
        let mut out = vec![0.0; self.0.len() + o.0.len() - 1];
        for (i, a) in self.0.iter().enumerate() {
            for (j, b) in o.0.iter().enumerate() {
                out[i + j] += a * b;
            }
        }
        Poly(out)
    }
    fn pow(&self, n: u32) -> Poly {
        (0..n).fold(Poly::c(1.0), |acc, _| acc.mul(self))
    }
}

/// Closed-form centroid action difference (path 2 minus path 1) divided by
/// hbar, as a polynomial in the delay. Only valid when every force is
/// position independent; the width-dependent phase is then common to both
/// paths and cancels.
pub fn relative_phase(record: &RunRecord, mode: DelayMode) -> Result<PhasePolynomial> {
    let (action, _, _) = phase_polynomials(record, mode)?;
    Ok(finish(action, mode))
}

/// Phase of <psi1|psi2> as a polynomial in the delay: the action difference
/// minus the separation term pbar dz / hbar. For equal packet shapes this is
/// exact, and the readout phase equals it up to a constant.
pub fn interference_phase(record: &RunRecord, mode: DelayMode) -> Result<PhasePolynomial> {
    let (action, q, v) = phase_polynomials(record, mode)?;
    let m = record.initial.mass;
    let separation = v[0].add(&v[1]).scale(0.5 * m / HBAR).mul(&q[1].sub(&q[0]));
    Ok(finish(action.sub(&separation), mode))
}

fn finish(phase: Poly, mode: DelayMode) -> PhasePolynomial {
    let mut coefficients = phase.0;
    coefficients.resize(coefficients.len().max(3), 0.0);
    PhasePolynomial { coefficients, mode }
}

/// (action difference / hbar, final positions, final velocities) as polynomials.
fn phase_polynomials(record: &RunRecord, mode: DelayMode) -> Result<(Poly, [Poly; 2], [Poly; 2])> {
    let tl = &record.timeline;
    if !tl.field.is_piecewise_constant() {
        return Err(SgiError::Unsupported(
            "closed-form relative phase needs a position-independent force".into(),
        ));
    }
    let m = record.initial.mass;
    let g_force = if tl.gravity { m * G_GRAVITY } else { 0.0 };
    let segs = tl.durations.segments();
    let mut q = [Poly::c(record.initial.z), Poly::c(record.initial.z)];
    let mut v = [Poly::c(record.initial.p / m), Poly::c(record.initial.p / m)];
    let mut action = [Poly::c(0.0), Poly::c(0.0)];
    let mut labels = [SpinLabel::ONE, SpinLabel::TWO];
    for k in 0..=6 {
        if tl.pi_boundaries.contains(&k) {
            labels = [swap_label(labels[0]), swap_label(labels[1])];
        }
        if k == 6 {
            break;
        }
        let is_delay = match (k, mode) {
            (1, _) => true,
            (4, DelayMode::Linked) => true,
            _ => false,
        };
        let h = if is_delay { Poly::x() } else { Poly::c(segs[k]) };
        if !is_delay && segs[k] == 0.0 {
            continue;
        }
        let amplitude = tl.segment_amplitude(k);
        for path in 0..2 {
            let c1 = match amplitude {
                Some(a) => quadratic_potential(&tl.field, labels[path], a, m).map(|c| c.0).unwrap_or(0.0),
                None => 0.0,
            } + g_force;
            let acc = -c1 / m;
            let (h2, h3) = (h.pow(2), h.pow(3));
            // m/2 (v0^2 h + v0 a h^2 + a^2 h^3/3) - c1 (q0 h + v0 h^2/2 + a h^3/6)
            let kinetic = v[path]
                .mul(&v[path])
                .mul(&h)
                .add(&v[path].mul(&h2).scale(acc))
                .add(&h3.scale(acc * acc / 3.0))
                .scale(0.5 * m);
            let potential = q[path]
                .mul(&h)
                .add(&v[path].mul(&h2).scale(0.5))
                .add(&h3.scale(acc / 6.0))
                .scale(c1);
            action[path] = action[path].add(&kinetic.sub(&potential));
            q[path] = q[path].add(&v[path].mul(&h)).add(&h2.scale(0.5 * acc));
            v[path] = v[path].add(&h.scale(acc));
        }
    }
    Ok((action[1].sub(&action[0]).scale(1.0 / HBAR), q, v))
}

/// Readout population P1 for each readout phase in `phi_grid`.
pub fn fringe_scan(
    timeline: &PulseTimeline,
    initial: &GaussianState,
    initial_spin: &SpinState,
    phi_grid: &[f64],
) -> Result<Vec<(f64, f64)>> {
    if phi_grid.is_empty() {
        return Err(SgiError::Config("fringe scan needs at least one phase".into()));
    }
    let record = run(timeline, initial, initial_spin)?;
    Ok(phi_grid.iter().map(|&phi| (phi, record.population1(phi))).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct JitterSpec {
    /// relative RMS error of each pulse current
    pub current_rel_sigma: f64,
    /// RMS error of each segment duration (s)
    pub timing_sigma: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct JitterResult {
    pub phase_std: f64,
    /// contrast of the shot-averaged fringe |mean(C_k exp(i phi_k))|
    pub mean_contrast: f64,
    pub nominal_contrast: f64,
    pub nominal_phase: f64,
    /// per-shot phase relative to the nominal phase, wrapped to (-pi, pi]
    pub phases: Vec<f64>,
    pub contrasts: Vec<f64>,
}

pub fn jitter_monte_carlo(
    timeline: &PulseTimeline,
    initial: &GaussianState,
    initial_spin: &SpinState,
    jitter: JitterSpec,
    n_shots: usize,
    seed: u64,
) -> Result<JitterResult> {
    if n_shots < 2 {
        return Err(SgiError::Config(format!("jitter needs at least 2 shots, got {n_shots}")));
    }
    if !(jitter.current_rel_sigma >= 0.0 && jitter.timing_sigma >= 0.0) {
        return Err(SgiError::Config("jitter widths must be >= 0".into()));
    }
    let nominal = run(timeline, initial, initial_spin)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let base = timeline.durations.segments();
    let shots: Vec<PulseTimeline> = (0..n_shots)
        .map(|_| {
            let mut t = timeline.clone();
            for s in t.current_scale.iter_mut() {
                let n: f64 = StandardNormal.sample(&mut rng);
                *s *= 1.0 + jitter.current_rel_sigma * n;
            }
            let mut segs = base;
            for seg in segs.iter_mut() {
                let n: f64 = StandardNormal.sample(&mut rng);
                if *seg > 0.0 {
                    *seg = (*seg + jitter.timing_sigma * n).max(0.0);
                }
            }
            t.durations = PulseDurations::from_segments(segs, timeline.durations.td0);
            t
        })
        .collect();
    let outcomes: Vec<Result<(f64, f64)>> = shots
        .par_iter()
        .map(|t| run(t, initial, initial_spin).map(|r| (r.final_contrast, r.final_phase)))
        .collect();
    let mut phases = Vec::with_capacity(n_shots);
    let mut contrasts = Vec::with_capacity(n_shots);
    for o in outcomes {
        let (c, p) = o?;
        phases.push(wrap_phase(p - nominal.final_phase));
        contrasts.push(c);
    }
    let n = n_shots as f64;
    let mean = phases.iter().sum::<f64>() / n;
    let phase_std = (phases.iter().map(|p| (p - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
    let avg: Complex64 = phases
        .iter()
        .zip(&contrasts)
        .map(|(p, c)| Complex64::from_polar(*c, *p))
        .sum::<Complex64>()
        / n;
    Ok(JitterResult {
        phase_std,
        mean_contrast: avg.norm(),
        nominal_contrast: nominal.final_contrast,
        nominal_phase: nominal.final_phase,
        phases,
        contrasts,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::constants::M_RB87;

    const US: f64 = 1e-6;

    fn packet(sigma: f64) -> GaussianState {
        GaussianState::minimum_uncertainty(M_RB87, 0.0, 0.0, sigma)
    }

    #[test]
    fn timelines_follow_scheme_layout() {
        let f = FieldModel::calibrated(100.0);
        let d = PulseDurations::symmetric(6.0 * US, 100.0 * US);
        let si = build_timeline(Scheme::SpinInversion, d, f).unwrap();
        assert_eq!(si.gradient_sign_per_pulse, [1.0; 4]);
        let pis: Vec<f64> = si.rf_events.iter().filter(|e| e.is_pi()).map(|e| e.time).collect();
        assert_eq!(pis.len(), 2);
        assert!((pis[0] - 106.0 * US).abs() < 1e-15);
        assert!((pis[1] - 118.0 * US).abs() < 1e-15);
        let ca = build_timeline(Scheme::CurrentInversionA, d, f).unwrap();
        assert_eq!(ca.gradient_sign_per_pulse, [1.0, -1.0, -1.0, 1.0]);
        assert_eq!(ca.rf_events.iter().filter(|e| e.is_pi()).count(), 1);
        let sk = build_timeline(Scheme::SingleKick, PulseDurations { t1: 10.0 * US, ..d }, f).unwrap();
        assert_eq!((sk.durations.t2, sk.durations.t3, sk.durations.t4), (0.0, 0.0, 0.0));
        let hl = build_timeline(Scheme::HalfLoop, d, f).unwrap();
        assert_eq!((hl.durations.t3, hl.durations.t4), (0.0, 0.0));
        let bad = PulseDurations { t2: -1e-6, ..d };
        assert!(matches!(build_timeline(Scheme::HalfLoop, bad, f), Err(SgiError::Config(_))));
    }

    #[test]
    fn hd_examples() {
        assert_eq!(hd_contrast(0.0, 0.0, 1.0, 1.0), 1.0);
        assert!((hd_contrast(2.0, 0.0, 1.0, 1.0) - (-0.5f64).exp()).abs() < 1e-15);
        assert!((hd_contrast(2.0, 2.0, 1.0, 1.0) - (-1.0f64).exp()).abs() < 1e-15);
    }

    #[test]
    fn phenomenological_examples() {
        let sc = CoherenceScales { l_z: 1e-6, l_p: 1e-30 };
        assert!((phenomenological_contrast(1e-6, 0.0, &sc) - (-0.5f64).exp()).abs() < 1e-15);
        assert_eq!(phenomenological_contrast(0.0, 158.0 * 1e-30, &sc), 0.0);
        let s = packet(0.8e-6);
        let sc = coherence_scales(&s);
        for (dz, dp) in [(0.3e-6, 0.0), (1e-6, 2e-29), (0.0, 5e-29)] {
            let a = phenomenological_contrast(dz, dp, &sc);
            let b = hd_contrast(dz, dp, s.sigma_z(), s.sigma_p());
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn overlap_identity_and_offset() {
        let s = GaussianState { z: 1e-6, p: 3e-29, var_z: 2e-12, chirp: 4e9, global_phase: 1.3, mass: M_RB87 };
        let (m, p) = gaussian_overlap(&s, &s);
        assert!((m - 1.0).abs() < 1e-14 && p.abs() < 1e-12);
        let a = packet(1e-6);
        let b = GaussianState { z: 2e-6, ..a };
        assert!((gaussian_overlap(&a, &b).0 - (-0.5f64).exp()).abs() < 1e-14);
    }

    /// Adaptive Gauss-Kronrod (7-15) integral of a complex integrand.
    fn adaptive_gk<F: Fn(f64) -> Complex64>(f: &F, a: f64, b: f64, tol: f64, depth: u32) -> Complex64 {
        const XK: [f64; 8] = [
            0.991_455_371_120_812_6,
            0.949_107_912_342_758_5,
            0.864_864_423_359_769_1,
            0.741_531_185_599_394_5,
            0.586_087_235_467_691_1,
            0.405_845_151_377_397_2,
            0.207_784_955_007_898_48,
            0.0,
        ];
        const WK: [f64; 8] = [
            0.022935322010529225,
            0.063_092_092_629_978_56,
            0.104_790_010_322_250_19,
            0.140_653_259_715_525_92,
            0.169_004_726_639_267_9,
            0.190_350_578_064_785_42,
            0.204_432_940_075_298_89,
            0.209_482_141_084_727_82,
        ];
        const WG: [f64; 4] = [0.129_484_966_168_869_7, 0.279_705_391_489_276_64, 0.381_830_050_505_118_9, 0.417_959_183_673_469_4];
        let c = 0.5 * (a + b);
        let h = 0.5 * (b - a);
        let mut k = f(c) * WK[7];
        let mut g = f(c) * WG[3];
        for j in 0..7 {
            let s = f(c - h * XK[j]) + f(c + h * XK[j]);
            k += s * WK[j];
            if j % 2 == 1 {
                g += s * WG[j / 2];
            }
        }
        let (k, g) = (k * h, g * h);
        if (k - g).norm() <= tol || depth == 0 {
            k
        } else {
            adaptive_gk(f, a, c, 0.5 * tol, depth - 1) + adaptive_gk(f, c, b, 0.5 * tol, depth - 1)
        }
    }

    fn overlap_by_quadrature(a: &GaussianState, b: &GaussianState) -> Complex64 {
        let width = 12.0 * a.sigma_z().max(b.sigma_z());
        let lo = a.z.min(b.z) - width;
        let hi = a.z.max(b.z) + width;
        let f = |z: f64| a.amplitude(z).conj() * b.amplitude(z);
        let n = 64;
        let h = (hi - lo) / n as f64;
        (0..n).map(|i| adaptive_gk(&f, lo + i as f64 * h, lo + (i + 1) as f64 * h, 1e-14, 30)).sum::<Complex64>()
    }

    #[test]
    fn overlap_with_chirp_difference_matches_quadrature() {
        let a = GaussianState { z: 0.0, p: 0.0, var_z: 1e-12, chirp: 0.0, global_phase: 0.0, mass: M_RB87 };
        let b = GaussianState { chirp: 2e11, ..a };
        let (m, ph) = gaussian_overlap(&a, &b);
        assert!(m < 1.0);
        let exact = Complex64::from_polar(m, ph);
        let num = overlap_by_quadrature(&a, &b);
        assert!((exact - num).norm() / num.norm() < 1e-6);
    }

    fn uniform_symmetric(scheme: Scheme, pulse: f64, delay: f64) -> PulseTimeline {
        let f = FieldModel::uniform_for_relative_acceleration(635.0, M_RB87);
        build_timeline(scheme, PulseDurations::symmetric(pulse, delay), f).unwrap()
    }

    #[test]
    fn symmetric_uniform_loop_closes() {
        let tl = uniform_symmetric(Scheme::CurrentInversionA, 6.0 * US, 300.0 * US);
        let r = run(&tl, &packet(1.2e-6), &SpinState::one()).unwrap();
        assert!(r.final_delta_z().abs() < 1e-15);
        assert!(r.final_delta_p().abs() < 1e-28);
        assert!(r.final_contrast > 1.0 - 1e-10);
    }

    #[test]
    fn schemes_produce_identical_relative_motion() {
        let init = packet(1e-6);
        let d = PulseDurations { t1: 5.0 * US, t2: 6.0 * US, t3: 4.5 * US, t4: 7.0 * US, td1: 80.0 * US, td2: 60.0 * US, td0: 0.0 };
        let f = FieldModel::uniform_for_relative_acceleration(400.0, M_RB87);
        let rec = |s| run_sampled(&build_timeline(s, d, f).unwrap(), &init, &SpinState::one(), 5).unwrap();
        let a = rec(Scheme::CurrentInversionA);
        let b = rec(Scheme::SpinInversion);
        for i in 0..a.times.len() {
            assert!((a.delta_z[i].abs() - b.delta_z[i].abs()).abs() < 1e-12 * 1e-6);
            assert!((a.delta_p[i].abs() - b.delta_p[i].abs()).abs() < 1e-12 * 1e-27);
        }
        let c = rec(Scheme::CurrentInversionB);
        for i in 0..a.times.len() {
            assert!((a.delta_z[i].abs() - c.delta_z[i].abs()).abs() < 1e-18);
        }
    }

    #[test]
    fn half_loop_separation_matches_hand_formula() {
        let a = 481.6;
        let f = FieldModel::calibrated(a);
        let d = PulseDurations { t1: 5.4 * US, t2: 5.4 * US, td1: 186.8 * US, ..Default::default() };
        let tl = build_timeline(Scheme::HalfLoop, d, f).unwrap();
        let r = run_sampled(&tl, &packet(0.25e-6), &SpinState::one(), 4).unwrap();
        let (dz, _) = max_separation(&r).unwrap();
        let expected = a * (5.4 * US).powi(2) + a * 5.4 * US * 186.8 * US;
        assert!((dz - expected).abs() / expected < 1e-10);
        assert!((dz - 0.5e-6).abs() / 0.5e-6 < 0.02);
    }

    #[test]
    fn single_kick_and_zero_field_separations() {
        let f = FieldModel::calibrated(59.5);
        let tl = build_timeline(Scheme::SingleKick, PulseDurations { t1: 10.0 * US, ..Default::default() }, f).unwrap();
        let r = run(&tl, &packet(1e-6), &SpinState::one()).unwrap();
        let (_, dp) = max_separation(&r).unwrap();
        assert!((dp - M_RB87 * 59.5 * 10.0 * US).abs() < 1e-12 * dp);
        let tl = uniform_symmetric(Scheme::SpinInversion, 6.0 * US, 50.0 * US).with_field(FieldModel::uniform(0.0));
        let r = run(&tl, &packet(1e-6), &SpinState::one()).unwrap();
        assert_eq!(max_separation(&r).unwrap(), (0.0, 0.0));
    }

    #[test]
    fn readout_matches_ramsey_form() {
        let f = FieldModel::calibrated(300.0);
        let d = PulseDurations { t1: 5.0 * US, t2: 5.0 * US, td1: 40.0 * US, ..Default::default() };
        for scheme in Scheme::ALL {
            let tl = build_timeline(scheme, d, f).unwrap();
            let r = run(&tl, &packet(0.5e-6), &SpinState::one()).unwrap();
            for k in 0..12 {
                let phi = k as f64 * 0.5;
                let expected = crate::spinsys::ramsey_population(r.final_phase, r.final_contrast, phi);
                assert!((r.population1(phi) - expected).abs() < 1e-12);
            }
            assert!((r.final_contrast - r.contrasts.overlap).abs() < 1e-15);
        }
    }

    #[test]
    fn fringe_extremes() {
        let tl = uniform_symmetric(Scheme::SpinInversion, 6.0 * US, 100.0 * US);
        let grid: Vec<f64> = (0..200).map(|i| i as f64 * 2.0 * PI / 200.0).collect();
        let f = fringe_scan(&tl, &packet(1e-6), &SpinState::one(), &grid).unwrap();
        let (lo, hi) = f.iter().fold((1.0f64, 0.0f64), |(l, h), (_, p)| (l.min(*p), h.max(*p)));
        assert!((hi - lo - 1.0).abs() < 1e-3);
        let tl = build_timeline(
            Scheme::SingleKick,
            PulseDurations { t1: 50.0 * US, ..Default::default() },
            FieldModel::calibrated(2000.0),
        )
        .unwrap();
        let f = fringe_scan(&tl, &packet(6e-6), &SpinState::one(), &grid).unwrap();
        assert!(f.iter().all(|(_, p)| (p - 0.5).abs() < 1e-12));
        assert!(fringe_scan(&tl, &packet(1e-6), &SpinState::one(), &[]).is_err());
    }

    #[test]
    fn splitting_phase_spread_value() {
        let f = M_RB87 * 481.6;
        let s = splitting_phase_spread(f, 5.4 * US, 1.5e-6);
        assert!((s - 5.3).abs() < 0.1, "spread = {s}");
    }

    #[test]
    fn relative_phase_polynomial_matches_numeric_phase() {
        let init = packet(0.25e-6);
        let f = FieldModel::calibrated(481.0);
        for (scheme, mode) in [(Scheme::HalfLoop, DelayMode::Td1), (Scheme::CurrentInversionA, DelayMode::Linked), (Scheme::SpinInversion, DelayMode::Linked)] {
            let mut poly = None;
            for td in [0.0, 50.0 * US, 173.0 * US, 400.0 * US] {
                let mut d = PulseDurations::symmetric(5.4 * US, td);
                if mode == DelayMode::Td1 {
                    d.td2 = 0.0;
                }
                let tl = build_timeline(scheme, d, f).unwrap();
                let r = run(&tl, &init, &SpinState::one()).unwrap();
                let p = poly.get_or_insert_with(|| relative_phase(&r, mode).unwrap()).clone();
                let diff = p.eval(td) - r.final_rel_phase();
                assert!(diff.abs() < 1e-8, "{scheme:?} td={td}: diff {diff}");
                for c in p.coefficients.iter().skip(3) {
                    assert!((c * 400e-6f64.powi(3)).abs() < 1e-9);
                }
            }
            let p = poly.unwrap();
            if scheme == Scheme::HalfLoop {
                assert!(p.coefficient(1).abs() > 0.0 && p.coefficient(2).abs() > 0.0);
            }
        }
    }

    #[test]
    fn interference_phase_tracks_readout_phase() {
        let init = packet(0.25e-6);
        let f = FieldModel::calibrated(481.0);
        let rec = |td: f64| {
            let d = PulseDurations { t1: 5.4 * US, t2: 5.4 * US, td1: td, ..Default::default() };
            run(&build_timeline(Scheme::HalfLoop, d, f).unwrap(), &init, &SpinState::one()).unwrap()
        };
        let r0 = rec(0.0);
        let poly = interference_phase(&r0, DelayMode::Td1).unwrap();
        for td in [30.0 * US, 120.0 * US, 333.0 * US] {
            let r = rec(td);
            let d_sim = wrap_phase(r.overlap_phase - r0.overlap_phase);
            let d_poly = wrap_phase(poly.eval(td) - poly.eval(0.0));
            assert!(wrap_phase(d_sim - d_poly).abs() < 1e-6, "td {td}: {d_sim} vs {d_poly}");
            // readout phase runs opposite to the overlap phase
            assert!(wrap_phase(r.final_phase - r0.final_phase + d_sim).abs() < 1e-9);
        }
    }

    #[test]
    fn relative_phase_zero_gradient_and_unsupported() {
        let tl = uniform_symmetric(Scheme::HalfLoop, 5.0 * US, 100.0 * US).with_field(FieldModel::uniform(0.0));
        let r = run(&tl, &packet(1e-6), &SpinState::one()).unwrap();
        let p = relative_phase(&r, DelayMode::Td1).unwrap();
        assert!(p.coefficients.iter().all(|c| *c == 0.0));
        let tl = tl.with_field(FieldModel::thin_wire(0.1, 100e-6));
        let r = run(&tl, &packet(1e-6), &SpinState::one()).unwrap();
        assert!(matches!(relative_phase(&r, DelayMode::Td1), Err(SgiError::Unsupported(_))));
    }

    #[test]
    fn jitter_zero_and_dephasing_limits() {
        let tl = uniform_symmetric(Scheme::CurrentInversionA, 6.0 * US, 100.0 * US);
        let init = packet(1e-6);
        let r = jitter_monte_carlo(&tl, &init, &SpinState::one(), JitterSpec::default(), 10, 1).unwrap();
        assert_eq!(r.phase_std, 0.0);
        assert!((r.mean_contrast - r.nominal_contrast).abs() < 1e-12);
        let big = JitterSpec { current_rel_sigma: 0.0, timing_sigma: 50.0 * US };
        // random phases average down to the 1/sqrt(n) floor
        let n = 400;
        let r = jitter_monte_carlo(&tl, &init, &SpinState::one(), big, n, 2).unwrap();
        assert!(r.mean_contrast < 3.0 / (n as f64).sqrt(), "mean contrast {}", r.mean_contrast);
        assert!(jitter_monte_carlo(&tl, &init, &SpinState::one(), big, 1, 2).is_err());
    }

    #[test]
    fn jitter_is_deterministic_for_a_seed() {
        let tl = uniform_symmetric(Scheme::SpinInversion, 6.0 * US, 100.0 * US);
        let j = JitterSpec { current_rel_sigma: 1e-3, timing_sigma: 1e-9 };
        let a = jitter_monte_carlo(&tl, &packet(1e-6), &SpinState::one(), j, 50, 7).unwrap();
        let b = jitter_monte_carlo(&tl, &packet(1e-6), &SpinState::one(), j, 50, 7).unwrap();
        assert_eq!(a, b);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(64))]
            #[test]
            fn time_reversal_closure(pulse in 1e-6f64..20e-6, delay in 0.0f64..500e-6, a in 10.0f64..2000.0, scheme_idx in 0usize..3) {
                let f = FieldModel::uniform_for_relative_acceleration(a, M_RB87);
                let tl = build_timeline(Scheme::ALL[scheme_idx], PulseDurations::symmetric(pulse, delay), f).unwrap();
                let r = run(&tl, &packet(1e-6), &SpinState::one()).unwrap();
                prop_assert!(r.final_delta_z().abs() < 1e-15);
                prop_assert!(r.final_delta_p().abs() < 1e-28);
            }

            #[test]
            fn delta_antisymmetric_under_swap(a in 10.0f64..1000.0, t1 in 1e-6f64..20e-6) {
                let f = FieldModel::calibrated(a);
                let tl = build_timeline(Scheme::SingleKick, PulseDurations { t1, ..Default::default() }, f).unwrap();
                let r = run(&tl, &packet(1e-6), &SpinState::one()).unwrap();
                let dz_swap: Vec<f64> = r.branch1.iter().zip(&r.branch2).map(|(x, y)| x.z - y.z).collect();
                for (u, v) in r.delta_z.iter().zip(&dz_swap) {
                    prop_assert_eq!(*u, -*v);
                }
            }

            #[test]
            fn single_kick_contrast_monotone(a0 in 10.0f64..200.0) {
                let mut last = f64::INFINITY;
                for k in 0..12 {
                    let f = FieldModel::calibrated(a0 * (1.0 + k as f64));
                    let tl = build_timeline(Scheme::SingleKick, PulseDurations { t1: 10e-6, ..Default::default() }, f).unwrap();
                    let c = run(&tl, &packet(2e-6), &SpinState::one()).unwrap().final_contrast;
                    prop_assert!(c <= last + 1e-12);
                    last = c;
                }
            }

            #[test]
            fn hd_equals_overlap_for_equal_minimal_packets(dz in -5e-6f64..5e-6, dp in -1e-28f64..1e-28, sigma in 0.2e-6f64..5e-6) {
                let a = packet(sigma);
                let b = GaussianState { z: dz, p: dp, ..a };
                let (m, _) = gaussian_overlap(&a, &b);
                prop_assert!((m - hd_contrast(dz, dp, sigma, a.sigma_p())).abs() < 1e-10);
            }
        }
    }
}
