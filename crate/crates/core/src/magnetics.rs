//! Magnetic field sources along the vertical (z) axis and the spin-dependent
//! forces they produce.
//!
//! Wires run along x. The field is evaluated on the line y = 0 and projected on
//! the bias (y) axis, which is the quantization axis. With a wire at
//! (y_w, z_w) and d = z_w - z, the projected field of a thin wire is
//! B = mu0 I d / (2 pi (d^2 + y_w^2)).
//!
//! Sign convention for the spin-dependent potential: U = -m_F g_F mu_B B(z), so
//! the acceleration is a = m_F g_F mu_B dB/dz / m.

use serde::Serialize;
use std::f64::consts::PI;
use std::sync::OnceLock;

use crate::constants::{MU0, MU_B};
use crate::error::{Result, SgiError};
use crate::quadrature::gauss_legendre;
use crate::spinsys::SpinLabel;

/// Difference of m_F g_F between |2,2> and |2,1>; a calibrated acceleration is
/// the relative acceleration of that pair.
pub const CALIBRATION_WEIGHT: f64 = 0.5;

/// Smallest allowed distance between a field point and a thin-wire center.
const MIN_WIRE_DISTANCE: f64 = 1e-12;

const RECT_ORDER: usize = 16;

fn rect_rule() -> &'static (Vec<f64>, Vec<f64>) {
    static RULE: OnceLock<(Vec<f64>, Vec<f64>)> = OnceLock::new();
    RULE.get_or_init(|| gauss_legendre(RECT_ORDER))
}

/// Wire (or wire-center) position in the y-z plane.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct WirePosition {
    pub lateral: f64,
    pub height: f64,
}

impl WirePosition {
    pub fn on_axis(height: f64) -> Self {
        Self { lateral: 0.0, height }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FieldSource {
    /// B(z) = gradient z + curvature z^2 / 2
    UniformGradient { gradient: f64, curvature: f64 },
    ThinWire { current: f64, position: WirePosition },
    /// Rectangular cross-section `width` (along y) by `height` (along z).
    RectWire { current: f64, width: f64, height: f64, center: WirePosition },
    ThreeWireQuadrupole { currents: [f64; 3], positions: [WirePosition; 3] },
    /// Measured relative acceleration of |2,2> vs |2,1>; no geometry.
    CalibratedAcceleration { acceleration: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct FieldModel {
    pub source: FieldSource,
    /// Homogeneous bias setting the quantization axis (T). Removed in the
    /// rotating frame and therefore absent from the spatial potential.
    pub bias_field: f64,
}

/// Default bias used in the experiment, 36.7 G.
pub const DEFAULT_BIAS: f64 = 36.7e-4;

impl FieldModel {
    pub fn new(source: FieldSource) -> Self {
        Self { source, bias_field: DEFAULT_BIAS }
    }

    pub fn uniform(gradient: f64) -> Self {
        Self::new(FieldSource::UniformGradient { gradient, curvature: 0.0 })
    }

    pub fn calibrated(acceleration: f64) -> Self {
        Self::new(FieldSource::CalibratedAcceleration { acceleration })
    }

    pub fn thin_wire(current: f64, height: f64) -> Self {
        Self::new(FieldSource::ThinWire { current, position: WirePosition::on_axis(height) })
    }

    /// Uniform gradient producing relative acceleration `a_rel` between |2,2> and |2,1>.
    pub fn uniform_for_relative_acceleration(a_rel: f64, mass: f64) -> Self {
        Self::uniform(a_rel * mass / (CALIBRATION_WEIGHT * MU_B))
    }

    /// Same field with every current (or gradient) multiplied by `factor`.
    pub fn scaled(&self, factor: f64) -> Self {
        let source = match self.source {
            FieldSource::UniformGradient { gradient, curvature } => FieldSource::UniformGradient {
                gradient: gradient * factor,
                curvature: curvature * factor,
            },
            FieldSource::ThinWire { current, position } => FieldSource::ThinWire { current: current * factor, position },
            FieldSource::RectWire { current, width, height, center } => {
                FieldSource::RectWire { current: current * factor, width, height, center }
            }
            FieldSource::ThreeWireQuadrupole { currents, positions } => FieldSource::ThreeWireQuadrupole {
                currents: currents.map(|c| c * factor),
                positions,
            },
            FieldSource::CalibratedAcceleration { acceleration } => {
                FieldSource::CalibratedAcceleration { acceleration: acceleration * factor }
            }
        };
        Self { source, bias_field: self.bias_field }
    }

    /// True when the spin potential is at most quadratic in z everywhere.
    pub fn is_quadratic(&self) -> bool {
        matches!(
            self.source,
            FieldSource::UniformGradient { .. } | FieldSource::CalibratedAcceleration { .. }
        )
    }

    /// True when the spin force does not depend on position.
    pub fn is_piecewise_constant(&self) -> bool {
        match self.source {
            FieldSource::UniformGradient { curvature, .. } => curvature == 0.0,
            FieldSource::CalibratedAcceleration { .. } => true,
            _ => false,
        }
    }
}

/// Projected field and its first two z-derivatives.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub struct FieldSample {
    pub b: f64,
    pub dbdz: f64,
    pub d2bdz2: f64,
}

impl std::ops::Add for FieldSample {
    type Output = FieldSample;
    fn add(self, o: FieldSample) -> FieldSample {
        FieldSample { b: self.b + o.b, dbdz: self.dbdz + o.dbdz, d2bdz2: self.d2bdz2 + o.d2bdz2 }
    }
}

fn thin_wire_sample(current: f64, wire: WirePosition, z: f64) -> Result<FieldSample> {
    let d = wire.height - z;
    let y = wire.lateral;
    let r2 = d * d + y * y;
    if !(r2.sqrt() > MIN_WIRE_DISTANCE) {
        return Err(SgiError::Domain(format!("field point z={z} m lies on a thin wire")));
    }
    let k = MU0 * current / (2.0 * PI);
    Ok(FieldSample {
        b: k * d / r2,
        dbdz: k * (d * d - y * y) / (r2 * r2),
        d2bdz2: 2.0 * k * d * (d * d - 3.0 * y * y) / (r2 * r2 * r2),
    })
}

/// Rectangular wire integrated with a `panels x panels` composite
/// Gauss-Legendre rule (16 nodes per panel and direction).
pub fn rect_wire_sample(current: f64, width: f64, height: f64, center: WirePosition, z: f64, panels: usize) -> Result<FieldSample> {
    if !(width > 0.0 && height > 0.0) {
        return Err(SgiError::Domain("rectangular wire needs positive width and height".into()));
    }
    if center.lateral.abs() <= 0.5 * width && (z - center.height).abs() <= 0.5 * height {
        return Err(SgiError::Domain(format!("field point z={z} m lies inside the wire cross-section")));
    }
    let (nodes, weights) = rect_rule();
    let panels = panels.max(1);
    let (pw, ph) = (width / panels as f64, height / panels as f64);
    let density = current / (width * height);
    let mut acc = FieldSample::default();
    for iy in 0..panels {
        let y0 = center.lateral - 0.5 * width + (iy as f64 + 0.5) * pw;
        for iz in 0..panels {
            let z0 = center.height - 0.5 * height + (iz as f64 + 0.5) * ph;
            for (xy, wy) in nodes.iter().zip(weights) {
                for (xz, wz) in nodes.iter().zip(weights) {
                    let wire = WirePosition { lateral: y0 + 0.5 * pw * xy, height: z0 + 0.5 * ph * xz };
                    let w = wy * wz * 0.25 * pw * ph * density;
                    let s = thin_wire_sample(w, wire, z)?;
                    acc = acc + s;
                }
            }
        }
    }
    Ok(acc)
}

/// Field magnitude along the quantization axis and its z-derivatives at height `z`.
pub fn field_and_derivatives(model: &FieldModel, z: f64) -> Result<FieldSample> {
    match model.source {
        FieldSource::UniformGradient { gradient, curvature } => Ok(FieldSample {
            b: gradient * z + 0.5 * curvature * z * z,
            dbdz: gradient + curvature * z,
            d2bdz2: curvature,
        }),
        FieldSource::ThinWire { current, position } => thin_wire_sample(current, position, z),
        FieldSource::RectWire { current, width, height, center } => rect_wire_sample(current, width, height, center, z, 1),
        FieldSource::ThreeWireQuadrupole { currents, positions } => {
            let mut acc = FieldSample::default();
            for (c, p) in currents.iter().zip(positions.iter()) {
                acc = acc + thin_wire_sample(*c, *p, z)?;
            }
            Ok(acc)
        }
        FieldSource::CalibratedAcceleration { .. } => Err(SgiError::Unsupported(
            "a calibrated-acceleration model carries no field geometry".into(),
        )),
    }
}

/// Acceleration of a state with quantum number `m_f` and Landé factor `g_f`.
pub fn spin_acceleration(model: &FieldModel, z: f64, m_f: i32, g_f: f64, mass: f64) -> Result<f64> {
    let weight = m_f as f64 * g_f;
    match model.source {
        FieldSource::CalibratedAcceleration { acceleration } => Ok(acceleration * weight / CALIBRATION_WEIGHT),
        _ => {
            let s = field_and_derivatives(model, z)?;
            Ok(weight * MU_B * s.dbdz / mass)
        }
    }
}

pub fn label_acceleration(model: &FieldModel, z: f64, label: SpinLabel, mass: f64) -> Result<f64> {
    spin_acceleration(model, z, label.m_f as i32, label.g_f(), mass)
}

/// Acceleration of `pair.1` relative to `pair.0`.
pub fn differential_acceleration(model: &FieldModel, z: f64, pair: (SpinLabel, SpinLabel), mass: f64) -> Result<f64> {
    if pair.0 == pair.1 {
        return Err(SgiError::Domain("differential acceleration needs two distinct spin states".into()));
    }
    Ok(label_acceleration(model, z, pair.1, mass)? - label_acceleration(model, z, pair.0, mass)?)
}

/// Spin potential energy V, dV/dz, d2V/dz2 for `label` with the field scaled
/// by `amplitude` (current sign and magnitude factor).
pub fn spin_potential(model: &FieldModel, z: f64, label: SpinLabel, amplitude: f64, mass: f64) -> Result<(f64, f64, f64)> {
    match model.source {
        FieldSource::CalibratedAcceleration { acceleration } => {
            let a = amplitude * acceleration * label.zeeman_weight() / CALIBRATION_WEIGHT;
            Ok((-mass * a * z, -mass * a, 0.0))
        }
        _ => {
            let s = field_and_derivatives(model, z)?;
            let c = -label.zeeman_weight() * MU_B * amplitude;
            Ok((c * s.b, c * s.dbdz, c * s.d2bdz2))
        }
    }
}

/// Coefficients (c1, c2) of V(z) = c1 z + c2 z^2 / 2 for the quadratic models.
pub fn quadratic_potential(model: &FieldModel, label: SpinLabel, amplitude: f64, mass: f64) -> Option<(f64, f64)> {
    match model.source {
        FieldSource::UniformGradient { gradient, curvature } => {
            let c = -label.zeeman_weight() * MU_B * amplitude;
            Some((c * gradient, c * curvature))
        }
        FieldSource::CalibratedAcceleration { acceleration } => {
            let a = amplitude * acceleration * label.zeeman_weight() / CALIBRATION_WEIGHT;
            Some((-mass * a, 0.0))
        }
        _ => None,
    }
}

/// Thin-wire current that gives relative acceleration `a_rel` (|2,2> vs |2,1>)
/// at distance `distance` directly below the wire.
pub fn thin_wire_current_for(a_rel: f64, distance: f64, mass: f64) -> f64 {
    let gradient = a_rel * mass / (CALIBRATION_WEIGHT * MU_B);
    gradient * 2.0 * PI * distance * distance / MU0
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::constants::{M_C12, M_RB87};

    #[test]
    fn thin_wire_reference_values() {
        let m = FieldModel::thin_wire(1.0, 1.5e-6);
        let s = field_and_derivatives(&m, 0.0).unwrap();
        assert!((s.b - 0.13333).abs() < 1e-4, "B = {}", s.b);
        assert!((s.dbdz - 8.889e4).abs() / 8.889e4 < 1e-3, "dB/dz = {}", s.dbdz);
    }

    #[test]
    fn rect_wire_one_micron_from_surface() {
        let m = FieldModel::new(FieldSource::RectWire {
            current: 1.0,
            width: 1e-6,
            height: 1e-6,
            center: WirePosition::on_axis(1.5e-6),
        });
        let g = field_and_derivatives(&m, 0.0).unwrap().dbdz;
        assert!((g - 8.7e4).abs() / 8.7e4 < 0.1, "gradient {g}");
    }

    #[test]
    fn rect_quadrature_matches_refined_rule() {
        let c = WirePosition { lateral: 0.2e-6, height: 1.5e-6 };
        let coarse = rect_wire_sample(1.0, 1e-6, 1e-6, c, 0.0, 1).unwrap();
        let fine = rect_wire_sample(1.0, 1e-6, 1e-6, c, 0.0, 6).unwrap();
        assert!((coarse.b - fine.b).abs() / fine.b.abs() < 1e-9);
        assert!((coarse.dbdz - fine.dbdz).abs() / fine.dbdz.abs() < 1e-8);
        assert!((coarse.d2bdz2 - fine.d2bdz2).abs() / fine.d2bdz2.abs() < 1e-7);
    }

    #[test]
    fn rect_converges_to_thin_wire() {
        for size in [1e-6, 1e-7] {
            let rect = FieldModel::new(FieldSource::RectWire {
                current: 1.0,
                width: size,
                height: size,
                center: WirePosition::on_axis(20e-6),
            });
            let thin = FieldModel::thin_wire(1.0, 20e-6);
            let a = field_and_derivatives(&rect, 0.0).unwrap();
            let b = field_and_derivatives(&thin, 0.0).unwrap();
            assert!((a.b - b.b).abs() / b.b < 1e-3);
            assert!((a.dbdz - b.dbdz).abs() / b.dbdz < 1e-3);
        }
    }

    #[test]
    fn inside_wire_is_domain_error() {
        let rect = FieldModel::new(FieldSource::RectWire {
            current: 1.0,
            width: 1e-6,
            height: 1e-6,
            center: WirePosition::on_axis(0.0),
        });
        assert!(matches!(field_and_derivatives(&rect, 0.2e-6), Err(SgiError::Domain(_))));
        let thin = FieldModel::thin_wire(1.0, 3e-6);
        assert!(matches!(field_and_derivatives(&thin, 3e-6), Err(SgiError::Domain(_))));
    }

    #[test]
    fn thin_wire_gradient_inverse_square() {
        let m = FieldModel::thin_wire(0.7, 0.0);
        let g1 = field_and_derivatives(&m, -10e-6).unwrap().dbdz;
        let g2 = field_and_derivatives(&m, -20e-6).unwrap().dbdz;
        assert!((g2 / g1 - 0.25).abs() < 1e-10);
    }

    #[test]
    fn quadrupole_zero_with_nonzero_gradient() {
        // outer wires anti-parallel to the center wire; zero at depth equal to the spacing
        let s = 10e-6;
        let m = FieldModel::new(FieldSource::ThreeWireQuadrupole {
            currents: [-1.0, 1.0, -1.0],
            positions: [
                WirePosition { lateral: -s, height: 0.0 },
                WirePosition { lateral: 0.0, height: 0.0 },
                WirePosition { lateral: s, height: 0.0 },
            ],
        });
        let f = field_and_derivatives(&m, -s).unwrap();
        assert!(f.b.abs() < 1e-15, "B = {}", f.b);
        assert!(f.dbdz.abs() > 1.0);
    }

    #[test]
    fn quadrupole_is_superposition_of_thin_wires() {
        let positions = [
            WirePosition { lateral: -7e-6, height: 1e-6 },
            WirePosition { lateral: 0.0, height: 0.0 },
            WirePosition { lateral: 9e-6, height: 2e-6 },
        ];
        let currents = [-0.4, 1.1, -0.6];
        let quad = FieldModel::new(FieldSource::ThreeWireQuadrupole { currents, positions });
        for z in [-3e-6, -15e-6, -80e-6] {
            let q = field_and_derivatives(&quad, z).unwrap();
            let mut sum = FieldSample::default();
            for i in 0..3 {
                let w = FieldModel::new(FieldSource::ThinWire { current: currents[i], position: positions[i] });
                sum = sum + field_and_derivatives(&w, z).unwrap();
            }
            assert!((q.b - sum.b).abs() <= 1e-12 * sum.b.abs().max(1e-30));
            assert!((q.dbdz - sum.dbdz).abs() <= 1e-12 * sum.dbdz.abs());
            assert!((q.d2bdz2 - sum.d2bdz2).abs() <= 1e-12 * sum.d2bdz2.abs());
        }
    }

    #[test]
    fn derivatives_match_finite_differences() {
        let m = FieldModel::new(FieldSource::ThinWire {
            current: 0.8,
            position: WirePosition { lateral: 3e-6, height: 40e-6 },
        });
        let h = 1e-9;
        let z = 2e-6;
        let f = |z| field_and_derivatives(&m, z).unwrap();
        let d1 = (f(z + h).b - f(z - h).b) / (2.0 * h);
        let d2 = (f(z + h).dbdz - f(z - h).dbdz) / (2.0 * h);
        assert!((d1 - f(z).dbdz).abs() / d1.abs() < 1e-6);
        assert!((d2 - f(z).d2bdz2).abs() / d2.abs() < 1e-6);
    }

    #[test]
    fn uniform_gradient_relative_acceleration() {
        let m = FieldModel::uniform_for_relative_acceleration(481.0, M_RB87);
        let a = differential_acceleration(&m, 0.0, (SpinLabel::ONE, SpinLabel::TWO), M_RB87).unwrap();
        assert!((a - 481.0).abs() < 1e-10);
        let zero = FieldModel::uniform(0.0);
        assert_eq!(label_acceleration(&zero, 0.0, SpinLabel::TWO, M_RB87).unwrap(), 0.0);
    }

    #[test]
    fn nanodiamond_acceleration_with_two_bohr_magnetons() {
        // moment 2 mu_B == m_F g_F = 2
        let mass = 1e6 * M_C12;
        let m = FieldModel::uniform(8.7e4);
        let a = spin_acceleration(&m, 0.0, 1, 2.0, mass).unwrap();
        assert!((a - 81.0).abs() / 81.0 < 0.01, "a = {a}");
    }

    #[test]
    fn calibrated_values_pass_through() {
        for a in [59.5, 2641.0] {
            let m = FieldModel::calibrated(a);
            let d = differential_acceleration(&m, 0.0, (SpinLabel::ONE, SpinLabel::TWO), M_RB87).unwrap();
            assert!((d - a).abs() < 1e-12);
        }
        let m = FieldModel::calibrated(59.5);
        assert!(differential_acceleration(&m, 0.0, (SpinLabel::TWO, SpinLabel::TWO), M_RB87).is_err());
    }

    #[test]
    fn thin_wire_current_reproduces_acceleration() {
        let i = thin_wire_current_for(635.0, 95e-6, M_RB87);
        let m = FieldModel::thin_wire(i, 95e-6);
        let a = differential_acceleration(&m, 0.0, (SpinLabel::ONE, SpinLabel::TWO), M_RB87).unwrap();
        assert!((a - 635.0).abs() < 1e-9);
    }
}
