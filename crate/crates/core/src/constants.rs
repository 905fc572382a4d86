//! Physical constants and unit conventions.
//!
//! Everything inside the library is SI. Fundamental constants are CODATA 2018
//! exact or recommended values; rubidium data follow D. A. Steck,
//! "Rubidium 87 D Line Data" (rev. 2.2.1).

use serde::Serialize;

/// Reduced Planck constant (J s), CODATA 2018.
pub const HBAR: f64 = 1.054_571_817e-34;
/// Planck constant (J s), exact.
pub const PLANCK: f64 = 6.626_070_15e-34;
/// Bohr magneton (J/T), CODATA 2018.
pub const MU_B: f64 = 9.274_010_078_3e-24;
/// Vacuum permeability (T m / A), CODATA 2018.
pub const MU0: f64 = 1.256_637_062_12e-6;
/// Standard gravity (m/s^2).
pub const G_GRAVITY: f64 = 9.806_65;
/// Atomic mass unit (kg), CODATA 2018.
pub const AMU: f64 = 1.660_539_066_60e-27;
/// Mass of a 87Rb atom (kg), Steck.
pub const M_RB87: f64 = 1.443_160_648e-25;
/// 87Rb s-wave scattering length (m).
pub const A_S_RB87: f64 = 5.18e-9;
/// 87Rb ground-state hyperfine splitting (Hz), Steck.
pub const HFS_RB87: f64 = 6_834_682_610.904_29;
/// 87Rb electron g-factor g_J of 5S1/2, Steck.
pub const GJ_RB87: f64 = 2.002_331_13;
/// 87Rb nuclear g-factor g_I (sign convention E = +g_I mu_B m_I B), Steck.
pub const GI_RB87: f64 = -0.000_995_141_4;
/// 87Rb nuclear spin.
pub const I_RB87: f64 = 1.5;
/// Density of diamond (kg/m^3).
pub const DIAMOND_DENSITY: f64 = 3510.0;
/// Mass of a 12C atom (kg), 12 u exactly.
pub const M_C12: f64 = 12.0 * AMU;
/// Rubidium D2 line wavelength (m), Steck (vacuum).
pub const LAMBDA_D2: f64 = 780.241_209_686e-9;

/// Bundle of the constants above, for code that wants to pass them around or
/// serialize them into run manifests.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PhysicalConstants {
    pub hbar: f64,
    pub mu_b: f64,
    pub mu0: f64,
    pub g_gravity: f64,
    pub amu: f64,
    pub m_rb87: f64,
    pub a_s_rb87: f64,
    pub hfs_rb87: f64,
    pub gj_rb87: f64,
    pub gi_rb87: f64,
    pub diamond_density: f64,
    pub m_c12: f64,
    pub lambda_d2: f64,
}

impl PhysicalConstants {
    pub const REFERENCE: PhysicalConstants = PhysicalConstants {
        hbar: HBAR,
        mu_b: MU_B,
        mu0: MU0,
        g_gravity: G_GRAVITY,
        amu: AMU,
        m_rb87: M_RB87,
        a_s_rb87: A_S_RB87,
        hfs_rb87: HFS_RB87,
        gj_rb87: GJ_RB87,
        gi_rb87: GI_RB87,
        diamond_density: DIAMOND_DENSITY,
        m_c12: M_C12,
        lambda_d2: LAMBDA_D2,
    };
}

impl Default for PhysicalConstants {
    fn default() -> Self {
        Self::REFERENCE
    }
}

/// Single-photon recoil velocity h / (lambda m) on the Rb D2 line.
pub fn photon_recoil_velocity() -> f64 {
    recoil_velocity(LAMBDA_D2, M_RB87)
}

/// Recoil velocity for an arbitrary wavelength and mass.
pub fn recoil_velocity(wavelength: f64, mass: f64) -> f64 {
    PLANCK / (wavelength * mass)
}

/// Unit factors used at the configuration boundary.
pub mod units {
    pub const MICROSECOND: f64 = 1e-6;
    pub const MILLISECOND: f64 = 1e-3;
    pub const MICROMETER: f64 = 1e-6;
    pub const NANOMETER: f64 = 1e-9;
    pub const MM_PER_S: f64 = 1e-3;
    pub const GAUSS: f64 = 1e-4;
    pub const G_PER_CM: f64 = 1e-2;
    pub const KHZ: f64 = 1e3;
}
