//! Two-level spin physics of the |F=2, m_F=1> / |F=2, m_F=2> pair in 87Rb.

use num_complex::Complex64;
use serde::Serialize;
use std::f64::consts::{PI, TAU};

use crate::constants::{GI_RB87, GJ_RB87, HFS_RB87, I_RB87, MU_B, PLANCK};
use crate::error::{Result, SgiError};

/// Hyperfine ground-state label |F, m_F> of 87Rb.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
pub struct SpinLabel {
    pub f: u8,
    pub m_f: i8,
}

impl SpinLabel {
    /// |1> == |F=2, m_F=1>
    pub const ONE: SpinLabel = SpinLabel { f: 2, m_f: 1 };
    /// |2> == |F=2, m_F=2>
    pub const TWO: SpinLabel = SpinLabel { f: 2, m_f: 2 };

    pub fn new(f: u8, m_f: i8) -> Result<Self> {
        if !(f == 1 || f == 2) || m_f.unsigned_abs() > f {
            return Err(SgiError::Domain(format!("invalid hyperfine state |F={f}, mF={m_f}>")));
        }
        Ok(Self { f, m_f })
    }

    /// Linear-Zeeman Landé factor, +1/2 for F=2 and -1/2 for F=1
    /// (nuclear contribution neglected).
    pub fn g_f(self) -> f64 {
        if self.f == 2 {
            0.5
        } else {
            -0.5
        }
    }

    /// Magnetic quantum number times Landé factor, the weight of mu_B B in the
    /// linear Zeeman energy.
    pub fn zeeman_weight(self) -> f64 {
        self.m_f as f64 * self.g_f()
    }
}

impl Default for SpinLabel {
    fn default() -> Self {
        SpinLabel::ONE
    }
}

/// Exact Breit-Rabi energy (J) of the 87Rb ground state |F, m_F> at field `b` (T).
///
/// Energies are measured from the hyperfine centroid. The stretched states
/// m_F = +-2 use the linear closed form so that the square-root branch never
/// flips when x crosses 1.
pub fn breit_rabi_energy(b: f64, f: u8, m_f: i8) -> Result<f64> {
    let label = SpinLabel::new(f, m_f)?;
    if !(b >= 0.0) || !b.is_finite() {
        return Err(SgiError::Domain(format!("field must be non-negative, got {b}")));
    }
    let dim = 2.0 * I_RB87 + 1.0;
    let hfs = PLANCK * HFS_RB87;
    let m = label.m_f as f64;
    if label.f == 2 && label.m_f.unsigned_abs() == 2 {
        let sign = m.signum();
        return Ok(hfs * I_RB87 / dim + sign * 0.5 * (GJ_RB87 + 2.0 * I_RB87 * GI_RB87) * MU_B * b);
    }
    let x = (GJ_RB87 - GI_RB87) * MU_B * b / hfs;
    let branch = if label.f == 2 { 1.0 } else { -1.0 };
    let root = (1.0 + 4.0 * m * x / dim + x * x).sqrt();
    Ok(-hfs / (2.0 * dim) + GI_RB87 * MU_B * m * b + branch * 0.5 * hfs * root)
}

/// Spin state in the {|1>, |2>} basis.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpinState {
    pub amp1: Complex64,
    pub amp2: Complex64,
}

impl SpinState {
    pub fn one() -> Self {
        Self { amp1: Complex64::new(1.0, 0.0), amp2: Complex64::new(0.0, 0.0) }
    }

    pub fn two() -> Self {
        Self { amp1: Complex64::new(0.0, 0.0), amp2: Complex64::new(1.0, 0.0) }
    }

    pub fn norm_sqr(&self) -> f64 {
        self.amp1.norm_sqr() + self.amp2.norm_sqr()
    }

    pub fn population1(&self) -> f64 {
        self.amp1.norm_sqr()
    }

    pub fn population2(&self) -> f64 {
        self.amp2.norm_sqr()
    }

    /// |<self|other>|, insensitive to global phase.
    pub fn fidelity(&self, other: &SpinState) -> f64 {
        (self.amp1.conj() * other.amp1 + self.amp2.conj() * other.amp2).norm()
    }
}

/// An instantaneous RF rotation. `duration` is bookkeeping only.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RfEvent {
    pub time: f64,
    pub rotation_angle: f64,
    pub phase: f64,
    pub duration: f64,
}

impl RfEvent {
    pub fn new(time: f64, rotation_angle: f64, phase: f64, duration: f64) -> Result<Self> {
        if !(duration >= 0.0) {
            return Err(SgiError::Config(format!("RF pulse duration must be >= 0, got {duration}")));
        }
        if !(rotation_angle > 0.0 && rotation_angle < TAU) {
            return Err(SgiError::Config(format!(
                "RF rotation angle must lie in (0, 2pi), got {rotation_angle}"
            )));
        }
        Ok(Self { time, rotation_angle, phase, duration })
    }

    pub fn half_pi(time: f64, phase: f64) -> Self {
        Self { time, rotation_angle: PI / 2.0, phase, duration: RF_PULSE_DURATION }
    }

    pub fn pi(time: f64) -> Self {
        Self { time, rotation_angle: PI, phase: 0.0, duration: RF_PULSE_DURATION }
    }

    pub fn is_pi(&self) -> bool {
        (self.rotation_angle - PI).abs() < 1e-12
    }
}

/// Physical length of the RF pulses used in the experiment.
pub const RF_PULSE_DURATION: f64 = 10e-6;

/// Rotate about the equatorial axis at azimuth `phase` by `angle`.
pub fn rf_rotate(state: SpinState, angle: f64, phase: f64) -> SpinState {
    let (s, c) = (0.5 * angle).sin_cos();
    let minus_i = Complex64::new(0.0, -1.0);
    let off12 = minus_i * Complex64::from_polar(s, -phase);
    let off21 = minus_i * Complex64::from_polar(s, phase);
    SpinState {
        amp1: state.amp1 * c + off12 * state.amp2,
        amp2: off21 * state.amp1 + state.amp2 * c,
    }
}

/// Population in |1> after the closing pi/2 pulse:
/// P1 = 0.5 C sin(readout_phase + interferometer_phase) + 0.5.
pub fn ramsey_population(interferometer_phase: f64, contrast: f64, readout_phase: f64) -> f64 {
    0.5 * contrast * (readout_phase + interferometer_phase).sin() + 0.5
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const GAUSS: f64 = 1e-4;

    fn e21_e10(b: f64) -> (f64, f64) {
        let e22 = breit_rabi_energy(b, 2, 2).unwrap();
        let e21 = breit_rabi_energy(b, 2, 1).unwrap();
        let e20 = breit_rabi_energy(b, 2, 0).unwrap();
        (e22 - e21, e21 - e20)
    }

    #[test]
    fn zero_field_hyperfine_limit() {
        for m2 in -2..=2 {
            for m1 in -1..=1 {
                let d = breit_rabi_energy(0.0, 2, m2).unwrap() - breit_rabi_energy(0.0, 1, m1).unwrap();
                assert!((d / PLANCK - HFS_RB87).abs() < 1e-3);
            }
        }
    }

    #[test]
    fn bias_field_splittings() {
        let (e21, e10) = e21_e10(36.7 * GAUSS);
        let f21 = e21 / PLANCK;
        let df = (e21 - e10).abs() / PLANCK;
        // quoted ~25 MHz and ~180 kHz
        assert!((f21 - 25.7e6).abs() / 25.7e6 < 0.05, "f21 = {f21}");
        assert!((df - 190e3).abs() / 190e3 < 0.15, "df = {df}");
        assert!((df - 180e3).abs() / 180e3 < 0.15);
    }

    #[test]
    fn stretched_state_is_linear_in_field() {
        let e = |b| breit_rabi_energy(b, 2, -2).unwrap();
        // well beyond x = 1 (~2400 G) the stretched branch stays linear
        let slope1 = (e(0.2) - e(0.1)) / 0.1;
        let slope2 = (e(1.0) - e(0.5)) / 0.5;
        assert!((slope1 - slope2).abs() / slope1.abs() < 1e-9);
        assert!(slope1 < 0.0);
    }

    #[test]
    fn low_field_is_linear_zeeman() {
        let b = 1.0 * GAUSS;
        for m in -2..=2i8 {
            if m == 0 {
                continue;
            }
            let shift = breit_rabi_energy(b, 2, m).unwrap() - breit_rabi_energy(0.0, 2, m).unwrap();
            let linear = 0.5 * m as f64 * MU_B * b;
            assert!((shift - linear).abs() / linear.abs() < 0.01, "m={m}");
        }
    }

    #[test]
    fn quadratic_splitting_difference() {
        let b = 0.5 * GAUSS;
        let d = |b| {
            let (a, c) = e21_e10(b);
            (a - c).abs()
        };
        let ratio = d(2.0 * b) / d(b);
        assert!((3.9..=4.1).contains(&ratio), "ratio = {ratio}");
    }

    #[test]
    fn rejects_invalid_labels() {
        assert!(breit_rabi_energy(0.0, 1, 2).is_err());
        assert!(breit_rabi_energy(0.0, 3, 0).is_err());
        assert!(breit_rabi_energy(-1.0, 2, 0).is_err());
    }

    #[test]
    fn half_pi_makes_equal_superposition() {
        let s = rf_rotate(SpinState::two(), PI / 2.0, 0.0);
        assert!((s.population1() - 0.5).abs() < 1e-15);
        assert!((s.population2() - 0.5).abs() < 1e-15);
    }

    #[test]
    fn two_pi_pulses_restore_state() {
        let s0 = rf_rotate(SpinState::two(), 1.1, 0.4);
        let s = rf_rotate(rf_rotate(s0, PI, 0.7), PI, 0.7);
        assert!((s.fidelity(&s0) - 1.0).abs() < 1e-14);
    }

    #[test]
    fn opposite_phase_half_pi_undoes_rotation() {
        let s = rf_rotate(rf_rotate(SpinState::two(), PI / 2.0, 0.0), PI / 2.0, PI);
        assert!((s.fidelity(&SpinState::two()) - 1.0).abs() < 1e-14);
    }

    #[test]
    fn ramsey_examples() {
        assert!((ramsey_population(0.0, 1.0, PI / 2.0) - 1.0).abs() < 1e-15);
        assert_eq!(ramsey_population(0.0, 0.0, 1.234), 0.5);
        let p: Vec<f64> = (0..400).map(|k| ramsey_population(0.3, 0.8, k as f64 * TAU / 400.0)).collect();
        let hi = p.iter().cloned().fold(f64::MIN, f64::max);
        let lo = p.iter().cloned().fold(f64::MAX, f64::min);
        assert!((hi - lo - 0.8).abs() < 1e-3);
        assert!((ramsey_population(0.3, 0.8, PI / 2.0 - 0.3) - 0.9).abs() < 1e-15);
    }

    #[test]
    fn rf_event_validation() {
        assert!(RfEvent::new(0.0, PI, 0.0, -1.0).is_err());
        assert!(RfEvent::new(0.0, 0.0, 0.0, 1.0).is_err());
        assert!(RfEvent::new(0.0, TAU, 0.0, 1.0).is_err());
        assert!(RfEvent::new(0.0, PI / 2.0, 0.0, 1e-5).is_ok());
    }

    proptest! {
        #[test]
        fn rotations_preserve_norm(angles in proptest::collection::vec((0.0f64..TAU, -PI..PI), 1..20)) {
            let mut s = SpinState::two();
            for (a, p) in angles {
                s = rf_rotate(s, a, p);
            }
            prop_assert!((s.norm_sqr() - 1.0).abs() < 1e-12);
        }
    }
}
