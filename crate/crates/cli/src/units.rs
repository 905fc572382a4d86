//! Unit-suffixed quantities such as "5.4us" or "481 m/s^2".

use std::fmt;

/// Decimal prefixes are applied in the exponent so "5.4us" is exactly 5.4e-6.
#[derive(Debug, Clone, Copy, PartialEq)]
enum Scale {
    Pow10(i32),
    Factor(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dimension {
    Time,
    Length,
    Velocity,
    Acceleration,
    Gradient,
    Curvature,
    Field,
    Current,
    Frequency,
    Angle,
    Density,
    Mass,
}

impl Dimension {
    /// Accepted suffixes and their SI scale.
    fn units(self) -> &'static [(&'static str, Scale)] {
        use Scale::{Factor, Pow10};
        match self {
            Dimension::Time => &[("s", Pow10(0)), ("ms", Pow10(-3)), ("us", Pow10(-6)), ("µs", Pow10(-6)), ("ns", Pow10(-9))],
            Dimension::Length => &[("m", Pow10(0)), ("mm", Pow10(-3)), ("um", Pow10(-6)), ("µm", Pow10(-6)), ("nm", Pow10(-9))],
            Dimension::Velocity => &[("m/s", Pow10(0)), ("mm/s", Pow10(-3)), ("um/s", Pow10(-6)), ("µm/s", Pow10(-6))],
            Dimension::Acceleration => &[("m/s^2", Pow10(0)), ("m/s2", Pow10(0))],
            Dimension::Gradient => &[("T/m", Pow10(0)), ("G/cm", Pow10(-2)), ("G/m", Pow10(-4))],
            Dimension::Curvature => &[("T/m^2", Pow10(0)), ("T/m2", Pow10(0)), ("G/cm^2", Pow10(0))],
            Dimension::Field => &[("T", Pow10(0)), ("mT", Pow10(-3)), ("G", Pow10(-4))],
            Dimension::Current => &[("A", Pow10(0)), ("mA", Pow10(-3))],
            Dimension::Frequency => &[("Hz", Pow10(0)), ("kHz", Pow10(3)), ("MHz", Pow10(6))],
            Dimension::Angle => &[("rad", Pow10(0)), ("deg", Factor(std::f64::consts::PI / 180.0))],
            Dimension::Density => &[("kg/m^3", Pow10(0)), ("kg/m3", Pow10(0)), ("g/cm^3", Pow10(3))],
            Dimension::Mass => &[("kg", Pow10(0)), ("amu", Factor(sgi_core::constants::AMU)), ("u", Factor(sgi_core::constants::AMU))],
        }
    }

    pub fn si_unit(self) -> &'static str {
        match self {
            Dimension::Time => "s",
            Dimension::Length => "m",
            Dimension::Velocity => "m/s",
            Dimension::Acceleration => "m/s^2",
            Dimension::Gradient => "T/m",
            Dimension::Curvature => "T/m^2",
            Dimension::Field => "T",
            Dimension::Current => "A",
            Dimension::Frequency => "Hz",
            Dimension::Angle => "rad",
            Dimension::Density => "kg/m^3",
            Dimension::Mass => "kg",
        }
    }

    const ALL: [Dimension; 12] = [
        Dimension::Time,
        Dimension::Length,
        Dimension::Velocity,
        Dimension::Acceleration,
        Dimension::Gradient,
        Dimension::Curvature,
        Dimension::Field,
        Dimension::Current,
        Dimension::Frequency,
        Dimension::Angle,
        Dimension::Density,
        Dimension::Mass,
    ];

    fn scale(self, unit: &str) -> Option<Scale> {
        self.units().iter().find(|(u, _)| *u == unit).map(|(_, f)| *f)
    }
}

impl fmt::Display for Dimension {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", format!("{self:?}").to_lowercase())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum UnitError {
    /// a bare number, or a string without a suffix
    Missing,
    /// the suffix belongs to another dimension
    Mismatch { unit: String, found: Dimension },
    Unknown(String),
    BadNumber(String),
}

impl fmt::Display for UnitError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            UnitError::Missing => write!(f, "missing unit"),
            UnitError::Mismatch { unit, found } => write!(f, "unit '{unit}' is a {found} unit"),
            UnitError::Unknown(u) => write!(f, "unknown unit '{u}'"),
            UnitError::BadNumber(s) => write!(f, "cannot read a number from '{s}'"),
        }
    }
}

/// Length of the leading floating-point literal in `s`.
fn number_prefix(s: &str) -> usize {
    let b = s.as_bytes();
    let mut i = 0;
    if i < b.len() && (b[i] == b'+' || b[i] == b'-') {
        i += 1;
    }
    while i < b.len() && (b[i].is_ascii_digit() || b[i] == b'.') {
        i += 1;
    }
    if i < b.len() && (b[i] == b'e' || b[i] == b'E') {
        let mut j = i + 1;
        if j < b.len() && (b[j] == b'+' || b[j] == b'-') {
            j += 1;
        }
        if j < b.len() && b[j].is_ascii_digit() {
            while j < b.len() && b[j].is_ascii_digit() {
                j += 1;
            }
            i = j;
        }
    }
    i
}

/// Parse "<number><unit>" into SI for dimension `dim`.
pub fn parse_quantity(text: &str, dim: Dimension) -> Result<f64, UnitError> {
    let text = text.trim();
    let split = number_prefix(text);
    let (num, unit) = text.split_at(split);
    let bad = || UnitError::BadNumber(text.to_string());
    let value: f64 = num.parse().map_err(|_| bad())?;
    let unit = unit.trim();
    if unit.is_empty() {
        return Err(UnitError::Missing);
    }
    match dim.scale(unit) {
        Some(Scale::Factor(f)) => return Ok(value * f),
        Some(Scale::Pow10(k)) => {
            let (mantissa, exp) = match num.find(['e', 'E']) {
                Some(i) => (&num[..i], num[i + 1..].parse::<i32>().map_err(|_| bad())?),
                None => (num, 0),
            };
            return format!("{mantissa}e{}", exp + k).parse().map_err(|_| bad());
        }
        None => {}
    }
    match Dimension::ALL.iter().find(|d| d.scale(unit).is_some()) {
        Some(&found) => Err(UnitError::Mismatch { unit: unit.to_string(), found }),
        None => Err(UnitError::Unknown(unit.to_string())),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn converts_to_si() {
        assert_eq!(parse_quantity("5.4us", Dimension::Time), Ok(5.4e-6));
        assert_eq!(parse_quantity("300 us", Dimension::Time), Ok(300e-6));
        assert_eq!(parse_quantity("1e-3s", Dimension::Time), Ok(1e-3));
        assert_eq!(parse_quantity("481m/s^2", Dimension::Acceleration), Ok(481.0));
        assert_eq!(parse_quantity("36.7G", Dimension::Field), Ok(36.7e-4));
        assert!((parse_quantity("-0.4mm/s", Dimension::Velocity).unwrap() + 0.4e-3).abs() < 1e-18);
        assert!((parse_quantity("2.5e1 um", Dimension::Length).unwrap() - 25e-6).abs() < 1e-18);
    }

    #[test]
    fn distinct_failures() {
        assert_eq!(parse_quantity("5.4", Dimension::Time), Err(UnitError::Missing));
        assert!(matches!(
            parse_quantity("5.4um", Dimension::Time),
            Err(UnitError::Mismatch { found: Dimension::Length, .. })
        ));
        assert!(matches!(parse_quantity("5.4 furlong", Dimension::Time), Err(UnitError::Unknown(_))));
        assert!(matches!(parse_quantity("us", Dimension::Time), Err(UnitError::BadNumber(_))));
    }

    #[test]
    fn exponent_not_confused_with_unit() {
        // "e" followed by a non-digit is not an exponent
        assert!(matches!(parse_quantity("3e", Dimension::Time), Err(UnitError::Unknown(_))));
        assert_eq!(parse_quantity("2E+2 ms", Dimension::Time), Ok(0.2));
    }
}
