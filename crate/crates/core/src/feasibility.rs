//! Stern-Gerlach feasibility numbers for a nanodiamond carrying a single NV spin.

use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

use crate::constants::{DIAMOND_DENSITY, HBAR, MU_B, M_C12};
use crate::error::{Result, SgiError};
use crate::magnetics::{field_and_derivatives, FieldModel, FieldSource};

/// Recombination accuracy demonstrated with atoms (m).
pub const ATOMIC_RECOMBINATION_ACCURACY: f64 = 100e-9;
/// Ratio of that accuracy to the atomic splitting scale, used to scale the
/// accuracy with the object's splitting.
pub const RECOMBINATION_FRACTION: f64 = 0.1;
/// Current density above which a warning is emitted (A/m^2, i.e. 1e7 A/cm^2).
pub const CURRENT_DENSITY_WARNING: f64 = 1e11;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MacroObjectSpec {
    pub n_atoms: f64,
    pub atom_mass: f64,
    pub density: f64,
    /// magnetic moment in units of mu_B
    pub spin_moment: f64,
    pub trap_omega: f64,
    pub spin_coherence_time: f64,
}

impl Default for MacroObjectSpec {
    fn default() -> Self {
        Self {
            n_atoms: 1e6,
            atom_mass: M_C12,
            density: DIAMOND_DENSITY,
            spin_moment: 2.0,
            trap_omega: 2.0 * PI * 80e3,
            spin_coherence_time: 0.6,
        }
    }
}

impl MacroObjectSpec {
    pub fn validate(&self) -> Result<()> {
        let ok = self.n_atoms >= 1.0
            && self.atom_mass > 0.0
            && self.density > 0.0
            && self.spin_moment >= 0.0
            && self.trap_omega > 0.0
            && self.spin_coherence_time > 0.0;
        if ok {
            Ok(())
        } else {
            Err(SgiError::Config(format!("invalid macroscopic object {self:?}")))
        }
    }

    pub fn total_mass(&self) -> f64 {
        self.n_atoms * self.atom_mass
    }
}

pub fn object_radius(spec: &MacroObjectSpec) -> f64 {
    (3.0 * spec.total_mass() / (4.0 * PI * spec.density)).cbrt()
}

/// a = moment * mu_B * gradient / m
pub fn nv_acceleration(spec: &MacroObjectSpec, gradient: f64) -> f64 {
    spec.spin_moment * MU_B * gradient / spec.total_mass()
}

/// Maximum splitting a (T/4)^2 for each total time T.
pub fn splitting_table(a: f64, t_list: &[f64]) -> Vec<(f64, f64)> {
    t_list.iter().map(|&t| (t, a * (t / 4.0).powi(2))).collect()
}

/// Harmonic-oscillator ground-state length sqrt(hbar / (m omega)).
pub fn ground_state_coherence_length(spec: &MacroObjectSpec) -> f64 {
    (HBAR / (spec.total_mass() * spec.trap_omega)).sqrt()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplittingRow {
    pub t: f64,
    pub dz: f64,
    /// required accuracy 0.1 dz over the coherence length
    pub accuracy_ratio: f64,
    pub within_spin_coherence: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeasibilityReport {
    pub spec: MacroObjectSpec,
    pub total_mass: f64,
    pub radius: f64,
    pub gradient: f64,
    pub acceleration: f64,
    pub splittings: Vec<SplittingRow>,
    pub coherence_length: f64,
    /// atomic recombination accuracy over the object's coherence length
    pub recombination_budget: f64,
    pub current_density: Option<f64>,
    pub warnings: Vec<String>,
}

/// Position of an object `distance` below the lower surface of the wire.
fn object_position(wire: &FieldModel, distance: f64) -> f64 {
    match wire.source {
        FieldSource::RectWire { height, center, .. } => center.height - 0.5 * height - distance,
        FieldSource::ThinWire { position, .. } => position.height - distance,
        _ => 0.0,
    }
}

pub fn feasibility_report(
    spec: &MacroObjectSpec,
    wire: &FieldModel,
    distance: f64,
    t_list: &[f64],
) -> Result<FeasibilityReport> {
    spec.validate()?;
    if !(distance > 0.0) {
        return Err(SgiError::Config(format!("object distance must be > 0, got {distance}")));
    }
    if t_list.iter().any(|t| !(*t >= 0.0)) || t_list.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(SgiError::Config("interferometer times must be >= 0 and strictly increasing".into()));
    }
    let z = object_position(wire, distance);
    let gradient = match wire.source {
        FieldSource::CalibratedAcceleration { .. } => {
            return Err(SgiError::Unsupported("feasibility needs a field model, not a calibrated acceleration".into()))
        }
        _ => field_and_derivatives(wire, z)?.dbdz.abs(),
    };
    let acceleration = nv_acceleration(spec, gradient);
    let coherence_length = ground_state_coherence_length(spec);
    let splittings = splitting_table(acceleration, t_list)
        .into_iter()
        .map(|(t, dz)| SplittingRow {
            t,
            dz,
            accuracy_ratio: RECOMBINATION_FRACTION * dz / coherence_length,
            within_spin_coherence: t < spec.spin_coherence_time,
        })
        .collect();
    let current_density = match wire.source {
        FieldSource::RectWire { current, width, height, .. } => Some(current.abs() / (width * height)),
        _ => None,
    };
    let mut warnings = Vec::new();
    if let Some(j) = current_density {
        if j > CURRENT_DENSITY_WARNING {
            warnings.push(format!("current density {:.2e} A/cm^2 exceeds {:.0e} A/cm^2", j * 1e-4, CURRENT_DENSITY_WARNING * 1e-4));
        }
    }
    Ok(FeasibilityReport {
        spec: *spec,
        total_mass: spec.total_mass(),
        radius: object_radius(spec),
        gradient,
        acceleration,
        splittings,
        coherence_length,
        recombination_budget: ATOMIC_RECOMBINATION_ACCURACY / coherence_length,
        current_density,
        warnings,
    })
}

/// 1 um x 1 um wire carrying 1 A whose lower surface sits 1 um above the origin.
pub fn reference_wire() -> FieldModel {
    FieldModel::new(FieldSource::RectWire {
        current: 1.0,
        width: 1e-6,
        height: 1e-6,
        center: crate::magnetics::WirePosition::on_axis(1.5e-6),
    })
}

impl FeasibilityReport {
    /// Plain-text table of the report.
    pub fn to_table(&self) -> String {
        let mut s = String::new();
        s.push_str(&format!("total mass          {:.4e} kg\n", self.total_mass));
        s.push_str(&format!("radius              {:.4e} m\n", self.radius));
        s.push_str(&format!("gradient            {:.4e} T/m\n", self.gradient));
        s.push_str(&format!("acceleration        {:.4e} m/s^2\n", self.acceleration));
        s.push_str(&format!("coherence length    {:.4e} m\n", self.coherence_length));
        s.push_str(&format!("recombination budget {:.4e}\n", self.recombination_budget));
        s.push_str("T_s         dz_m        accuracy_ratio  within_T2\n");
        for r in &self.splittings {
            s.push_str(&format!("{:<11.4e} {:<11.4e} {:<15.4e} {}\n", r.t, r.dz, r.accuracy_ratio, r.within_spin_coherence));
        }
        for w in &self.warnings {
            s.push_str(&format!("warning: {w}\n"));
        }
        s
    }
}
