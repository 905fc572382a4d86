//! Scenario files: TOML with unit-suffixed physical quantities.
//!
//! ```toml
//! name = "half_vs_full"
//! experiment = "half_vs_full"
//! seed = 1
//!
//! [output]
//! format = "csv"
//!
//! [field]
//! kind = "calibrated"
//! acceleration = "481m/s^2"
//!
//! [initial]
//! kind = "coherence_length"
//! l_z = "0.5um"
//!
//! [timeline]
//! scheme = "current_inversion_a"
//! T1 = "5.4us"
//! T2 = "5.4us"
//!
//! [half_vs_full]
//! from = "0us"
//! to = "400us"
//! points = 161
//! ```

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use toml::{Spanned, Value};

use sgi_core::constants::{A_S_RB87, M_RB87};
use sgi_core::feasibility::MacroObjectSpec;
use sgi_core::interferometer::{build_timeline, JitterSpec, PulseDurations, PulseTimeline, Scheme};
use sgi_core::magnetics::{thin_wire_current_for, FieldModel, FieldSource, WirePosition};
use sgi_core::optimizer::{Constraint, FreeParam, Objective};
use sgi_core::wavepacket::{released_state, CondensateParams, GaussianState};

use crate::error::{ConfigError, ConfigErrorKind as K};
use crate::units::{parse_quantity, Dimension, UnitError};

type V = Spanned<Value>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Experiment {
    Simulate,
    Scan,
    Optimize,
    Fit,
    SingleKick,
    HalfVsFull,
    Jitter,
    Feasibility,
}

impl Experiment {
    const ALL: [Experiment; 8] = [
        Experiment::Simulate,
        Experiment::Scan,
        Experiment::Optimize,
        Experiment::Fit,
        Experiment::SingleKick,
        Experiment::HalfVsFull,
        Experiment::Jitter,
        Experiment::Feasibility,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Experiment::Simulate => "simulate",
            Experiment::Scan => "scan",
            Experiment::Optimize => "optimize",
            Experiment::Fit => "fit",
            Experiment::SingleKick => "single_kick",
            Experiment::HalfVsFull => "half_vs_full",
            Experiment::Jitter => "jitter",
            Experiment::Feasibility => "feasibility",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Format {
    #[default]
    Csv,
    Json,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OutputSpec {
    pub format: Format,
    pub path: Option<PathBuf>,
}

/// Evenly spaced sweep, endpoints included.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Sweep {
    pub from: f64,
    pub to: f64,
    pub points: usize,
}

impl Sweep {
    pub fn values(&self) -> Vec<f64> {
        if self.points == 1 {
            return vec![self.from];
        }
        (0..self.points)
            .map(|i| self.from + (self.to - self.from) * i as f64 / (self.points - 1) as f64)
            .collect()
    }
}

/// Field, initial packet and pulse sequence shared by the atom experiments.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Setup {
    pub timeline: PulseTimeline,
    pub initial: GaussianState,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ScanVariable {
    /// readout phase of the closing pi/2 pulse
    Phi,
    Td1,
    /// Td1 and Td2 together
    Td,
    /// reverse pulse T2 + T3, split equally, T2 + T3 + Td2 fixed
    Reverse,
}

impl ScanVariable {
    pub fn column(self) -> &'static str {
        match self {
            ScanVariable::Phi => "phi_rad",
            ScanVariable::Td1 => "Td1_s",
            ScanVariable::Td => "Td_s",
            ScanVariable::Reverse => "T2_plus_T3_s",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScanSpec {
    pub variable: ScanVariable,
    pub sweep: Sweep,
    pub readout_phase: Option<f64>,
    pub fit: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OptimizeSpec {
    pub free: Vec<FreeParam>,
    pub constraint: Constraint,
    pub objective: Objective,
    pub grid_points: usize,
    pub threshold: f64,
    /// Td1 samples for the optimal-T2 curve
    pub t2_curve: Vec<f64>,
    pub degree: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum FitKind {
    Sine,
    GaussianSine,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FitSpec {
    pub input: PathBuf,
    pub model: FitKind,
    /// None = free envelope center
    pub envelope_center: Option<f64>,
    pub k2: Option<f64>,
    pub phase_hint: Option<(f64, f64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FeasibilitySpec {
    pub object: MacroObjectSpec,
    pub wire: FieldModel,
    pub distance: f64,
    pub times: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "experiment", rename_all = "snake_case")]
pub enum Parameters {
    Simulate { setup: Setup, samples_per_segment: usize, fringe_points: usize },
    Scan { setup: Setup, scan: ScanSpec },
    Optimize { setup: Setup, optimize: OptimizeSpec },
    Fit(FitSpec),
    SingleKick { initial: GaussianState, t1: f64, sweep: Sweep, readout_phase: Option<f64>, gravity: bool },
    HalfVsFull { setup: Setup, sweep: Sweep, readout_phase: f64 },
    Jitter { setup: Setup, jitter: JitterSpec, shots: usize },
    Feasibility(FeasibilitySpec),
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Scenario {
    pub name: String,
    pub experiment: Experiment,
    pub seed: u64,
    pub output: OutputSpec,
    pub parameters: Parameters,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawScenario {
    name: Option<V>,
    experiment: Option<V>,
    seed: Option<V>,
    output: Option<Spanned<BTreeMap<String, V>>>,
    field: Option<Spanned<BTreeMap<String, V>>>,
    initial: Option<Spanned<BTreeMap<String, V>>>,
    timeline: Option<Spanned<BTreeMap<String, V>>>,
    simulate: Option<Spanned<BTreeMap<String, V>>>,
    scan: Option<Spanned<BTreeMap<String, V>>>,
    optimize: Option<Spanned<BTreeMap<String, V>>>,
    fit: Option<Spanned<BTreeMap<String, V>>>,
    single_kick: Option<Spanned<BTreeMap<String, V>>>,
    half_vs_full: Option<Spanned<BTreeMap<String, V>>>,
    jitter: Option<Spanned<BTreeMap<String, V>>>,
    feasibility: Option<Spanned<BTreeMap<String, V>>>,
}

/// 1-based line and column of byte offset `pos`.
fn line_col(text: &str, pos: usize) -> (usize, usize) {
    let pos = pos.min(text.len());
    let before = &text[..pos];
    let line = before.matches('\n').count() + 1;
    let col = before.rfind('\n').map_or(pos, |i| pos - i - 1) + 1;
    (line, col)
}

/// Text between the first pair of backticks in a serde message.
fn backticked(msg: &str) -> Option<&str> {
    let start = msg.find('`')? + 1;
    let end = msg[start..].find('`')? + start;
    Some(&msg[start..end])
}

/// One TOML table with strict key checking.
struct Table<'a> {
    text: &'a str,
    name: &'static str,
    span: std::ops::Range<usize>,
    entries: BTreeMap<String, V>,
    allowed: Vec<&'static str>,
}

impl<'a> Table<'a> {
    fn new(text: &'a str, name: &'static str, raw: Spanned<BTreeMap<String, V>>) -> Self {
        let span = raw.span();
        Self { text, name, span, entries: raw.into_inner(), allowed: Vec::new() }
    }

    fn key(&self, k: &str) -> String {
        format!("{}.{k}", self.name)
    }

    fn pos(&self, v: &V) -> Option<(usize, usize)> {
        Some(line_col(self.text, v.span().start))
    }

    fn get(&mut self, k: &'static str) -> Option<&V> {
        self.allowed.push(k);
        self.entries.get(k)
    }

    fn required(&mut self, k: &'static str) -> Result<&V, ConfigError> {
        self.allowed.push(k);
        let pos = Some(line_col(self.text, self.span.start));
        let key = self.key(k);
        self.entries
            .get(k)
            .ok_or_else(|| ConfigError::new(K::MissingKey, key, "required key is missing").at(pos))
    }

    fn quantity_of(&self, k: &str, v: &V, dim: Dimension) -> Result<f64, ConfigError> {
        let key = self.key(k);
        let s = match v.get_ref() {
            Value::String(s) => s.as_str(),
            Value::Integer(_) | Value::Float(_) => {
                return Err(ConfigError::new(
                    K::MissingUnit,
                    key,
                    format!("missing unit: write the value as a string with a {dim} unit, e.g. \"{}\"", example(dim)),
                )
                .at(self.pos(v)))
            }
            other => {
                return Err(ConfigError::new(K::InvalidValue, key, format!("expected a {dim} quantity, got {other}"))
                    .at(self.pos(v)))
            }
        };
        let value = parse_quantity(s, dim).map_err(|e| {
            let kind = match e {
                UnitError::Missing => K::MissingUnit,
                UnitError::Mismatch { .. } => K::UnitMismatch,
                UnitError::Unknown(_) => K::UnknownUnit,
                UnitError::BadNumber(_) => K::InvalidValue,
            };
            let msg = match e {
                UnitError::Mismatch { .. } | UnitError::Missing => format!("{e}, expected a {dim} unit"),
                _ => e.to_string(),
            };
            ConfigError::new(kind, key.clone(), msg).at(self.pos(v))
        })?;
        if !value.is_finite() {
            return Err(ConfigError::new(K::InvalidValue, key, "value must be finite").at(self.pos(v)));
        }
        if dim == Dimension::Time && value < 0.0 {
            return Err(ConfigError::new(K::NegativeDuration, key, format!("duration must be >= 0, got {s}"))
                .at(self.pos(v)));
        }
        Ok(value)
    }

    fn quantity(&mut self, k: &'static str, dim: Dimension) -> Result<Option<f64>, ConfigError> {
        match self.get(k).cloned() {
            Some(v) => self.quantity_of(k, &v, dim).map(Some),
            None => Ok(None),
        }
    }

    fn req_quantity(&mut self, k: &'static str, dim: Dimension) -> Result<f64, ConfigError> {
        let v = self.required(k)?.clone();
        self.quantity_of(k, &v, dim)
    }

    fn positive(&mut self, k: &'static str, dim: Dimension) -> Result<f64, ConfigError> {
        let v = self.required(k)?.clone();
        let x = self.quantity_of(k, &v, dim)?;
        if x > 0.0 {
            Ok(x)
        } else {
            Err(ConfigError::new(K::InvalidValue, self.key(k), "must be > 0").at(self.pos(&v)))
        }
    }

    fn quantity_list(&mut self, k: &'static str, dim: Dimension) -> Result<Option<Vec<f64>>, ConfigError> {
        let Some(v) = self.get(k).cloned() else { return Ok(None) };
        let Value::Array(items) = v.get_ref() else {
            return Err(ConfigError::new(K::InvalidValue, self.key(k), "expected an array").at(self.pos(&v)));
        };
        items
            .iter()
            .map(|item| {
                let spanned = Spanned::new(v.span(), item.clone());
                self.quantity_of(k, &spanned, dim)
            })
            .collect::<Result<Vec<_>, _>>()
            .map(Some)
    }

    fn number(&mut self, k: &'static str) -> Result<Option<f64>, ConfigError> {
        let Some(v) = self.get(k).cloned() else { return Ok(None) };
        match v.get_ref() {
            Value::Integer(i) => Ok(Some(*i as f64)),
            Value::Float(f) if f.is_finite() => Ok(Some(*f)),
            Value::String(s) => Err(ConfigError::new(
                K::InvalidValue,
                self.key(k),
                format!("dimensionless quantity expected, got \"{s}\""),
            )
            .at(self.pos(&v))),
            other => Err(ConfigError::new(K::InvalidValue, self.key(k), format!("expected a number, got {other}"))
                .at(self.pos(&v))),
        }
    }

    fn count(&mut self, k: &'static str, min: usize) -> Result<Option<usize>, ConfigError> {
        let Some(v) = self.get(k).cloned() else { return Ok(None) };
        match v.get_ref() {
            Value::Integer(i) if *i >= min as i64 => Ok(Some(*i as usize)),
            other => Err(ConfigError::new(K::InvalidValue, self.key(k), format!("expected an integer >= {min}, got {other}"))
                .at(self.pos(&v))),
        }
    }

    fn boolean(&mut self, k: &'static str) -> Result<Option<bool>, ConfigError> {
        let Some(v) = self.get(k).cloned() else { return Ok(None) };
        match v.get_ref() {
            Value::Boolean(b) => Ok(Some(*b)),
            other => Err(ConfigError::new(K::InvalidValue, self.key(k), format!("expected true or false, got {other}"))
                .at(self.pos(&v))),
        }
    }

    fn string(&mut self, k: &'static str) -> Result<Option<(String, V)>, ConfigError> {
        let Some(v) = self.get(k).cloned() else { return Ok(None) };
        match v.get_ref() {
            Value::String(s) => Ok(Some((s.clone(), v.clone()))),
            other => Err(ConfigError::new(K::InvalidValue, self.key(k), format!("expected a string, got {other}"))
                .at(self.pos(&v))),
        }
    }

    /// String key mapped through `choices`.
    fn choice<T: Copy>(&mut self, k: &'static str, choices: &[(&str, T)]) -> Result<Option<T>, ConfigError> {
        let Some((s, v)) = self.string(k)? else { return Ok(None) };
        match choices.iter().find(|(name, _)| *name == s) {
            Some((_, t)) => Ok(Some(*t)),
            None => {
                let names: Vec<&str> = choices.iter().map(|c| c.0).collect();
                Err(ConfigError::new(
                    K::InvalidValue,
                    self.key(k),
                    format!("unknown value \"{s}\", expected one of {}", names.join(", ")),
                )
                .at(self.pos(&v)))
            }
        }
    }

    fn req_choice<T: Copy>(&mut self, k: &'static str, choices: &[(&str, T)]) -> Result<T, ConfigError> {
        self.required(k)?;
        Ok(self.choice(k, choices)?.expect("presence checked"))
    }

    /// Reject keys that were never asked for.
    fn finish(self) -> Result<(), ConfigError> {
        for (k, v) in &self.entries {
            if !self.allowed.contains(&k.as_str()) {
                let mut allowed = self.allowed.clone();
                allowed.sort_unstable();
                allowed.dedup();
                return Err(ConfigError::new(
                    K::UnknownKey,
                    self.key(k),
                    format!("unknown key, expected one of {}", allowed.join(", ")),
                )
                .at(self.pos(v)));
            }
        }
        Ok(())
    }
}

fn example(dim: Dimension) -> &'static str {
    match dim {
        Dimension::Time => "5.4us",
        Dimension::Length => "0.5um",
        Dimension::Velocity => "0.1mm/s",
        Dimension::Acceleration => "481m/s^2",
        Dimension::Gradient => "100G/cm",
        Dimension::Curvature => "1T/m^2",
        Dimension::Field => "36.7G",
        Dimension::Current => "1A",
        Dimension::Frequency => "126Hz",
        Dimension::Angle => "0rad",
        Dimension::Density => "3510kg/m^3",
        Dimension::Mass => "12amu",
    }
}

const SCHEMES: [(&str, Scheme); 5] = [
    ("current_inversion_a", Scheme::CurrentInversionA),
    ("current_inversion_b", Scheme::CurrentInversionB),
    ("spin_inversion", Scheme::SpinInversion),
    ("half_loop", Scheme::HalfLoop),
    ("single_kick", Scheme::SingleKick),
];

#[derive(Clone, Copy)]
enum FieldKind {
    Uniform,
    ThinWire,
    RectWire,
    ThreeWire,
    Calibrated,
}

fn parse_field(mut t: Table) -> Result<FieldModel, ConfigError> {
    let kind = t.req_choice(
        "kind",
        &[
            ("uniform", FieldKind::Uniform),
            ("thin_wire", FieldKind::ThinWire),
            ("rect_wire", FieldKind::RectWire),
            ("three_wire", FieldKind::ThreeWire),
            ("calibrated", FieldKind::Calibrated),
        ],
    )?;
    let bias = t.quantity("bias", Dimension::Field)?;
    let mut model = match kind {
        FieldKind::Calibrated => FieldModel::calibrated(t.req_quantity("acceleration", Dimension::Acceleration)?),
        FieldKind::Uniform => {
            let curvature = t.quantity("curvature", Dimension::Curvature)?.unwrap_or(0.0);
            let gradient = match t.quantity("relative_acceleration", Dimension::Acceleration)? {
                Some(a) => FieldModel::uniform_for_relative_acceleration(a, M_RB87),
                None => FieldModel::uniform(t.req_quantity("gradient", Dimension::Gradient)?),
            };
            match gradient.source {
                FieldSource::UniformGradient { gradient, .. } => {
                    FieldModel::new(FieldSource::UniformGradient { gradient, curvature })
                }
                _ => gradient,
            }
        }
        FieldKind::ThinWire => {
            let distance = t.positive("distance", Dimension::Length)?;
            let current = match t.quantity("relative_acceleration", Dimension::Acceleration)? {
                Some(a) => thin_wire_current_for(a, distance, M_RB87),
                None => t.req_quantity("current", Dimension::Current)?,
            };
            FieldModel::thin_wire(current, distance)
        }
        FieldKind::RectWire => {
            let current = t.req_quantity("current", Dimension::Current)?;
            let width = t.positive("width", Dimension::Length)?;
            let thickness = t.positive("thickness", Dimension::Length)?;
            let distance = t.positive("distance", Dimension::Length)?;
            FieldModel::new(FieldSource::RectWire {
                current,
                width,
                height: thickness,
                center: WirePosition::on_axis(distance + 0.5 * thickness),
            })
        }
        FieldKind::ThreeWire => {
            let current = t.req_quantity("current", Dimension::Current)?;
            let spacing = t.positive("spacing", Dimension::Length)?;
            let distance = t.positive("distance", Dimension::Length)?;
            let at = |lateral| WirePosition { lateral, height: distance };
            FieldModel::new(FieldSource::ThreeWireQuadrupole {
                currents: [-current, current, -current],
                positions: [at(-spacing), at(0.0), at(spacing)],
            })
        }
    };
    if let Some(b) = bias {
        model.bias_field = b;
    }
    t.finish()?;
    Ok(model)
}

#[derive(Clone, Copy)]
enum InitialKind {
    MinimumUncertainty,
    CoherenceLength,
    Condensate,
}

/// Initial packet and the release delay it implies.
fn parse_initial(mut t: Table) -> Result<(GaussianState, f64), ConfigError> {
    let kind = t.req_choice(
        "kind",
        &[
            ("minimum_uncertainty", InitialKind::MinimumUncertainty),
            ("coherence_length", InitialKind::CoherenceLength),
            ("condensate", InitialKind::Condensate),
        ],
    )?;
    let out = match kind {
        InitialKind::MinimumUncertainty => {
            let s = t.positive("sigma_z", Dimension::Length)?;
            (GaussianState::minimum_uncertainty(M_RB87, 0.0, 0.0, s), 0.0)
        }
        InitialKind::CoherenceLength => {
            let l = t.positive("l_z", Dimension::Length)?;
            (GaussianState::with_coherence_length(M_RB87, l), 0.0)
        }
        InitialKind::Condensate => {
            let mut p = CondensateParams::default();
            if let Some(n) = t.number("n_atoms")? {
                p.n_atoms = n;
            }
            if let Some(tr) = t.quantity_list("trap", Dimension::Frequency)? {
                if tr.len() != 3 {
                    return Err(ConfigError::new(K::InvalidValue, t.key("trap"), "expected three trap frequencies"));
                }
                p.omega = [tr[0], tr[1], tr[2]].map(|f| 2.0 * std::f64::consts::PI * f);
            }
            p.a_s = t.quantity("a_s", Dimension::Length)?.unwrap_or(A_S_RB87);
            if let Some(d) = t.quantity("release_delay", Dimension::Time)? {
                p.release_delay = d;
            }
            let state = released_state(&p).map_err(|e| ConfigError::new(K::InvalidValue, "initial", e.to_string()))?;
            (state, p.release_delay)
        }
    };
    t.finish()?;
    Ok(out)
}

fn parse_timeline(mut t: Table, field: FieldModel, td0: f64) -> Result<PulseTimeline, ConfigError> {
    let scheme = t.req_choice("scheme", &SCHEMES)?;
    let mut d = PulseDurations { td0, ..Default::default() };
    d.t1 = t.req_quantity("T1", Dimension::Time)?;
    for (k, slot) in [("T2", &mut d.t2), ("T3", &mut d.t3), ("T4", &mut d.t4), ("Td1", &mut d.td1), ("Td2", &mut d.td2)] {
        *slot = t.quantity(k, Dimension::Time)?.unwrap_or(0.0);
    }
    let gravity = t.boolean("gravity")?.unwrap_or(true);
    let spin_t2 = t.quantity("spin_t2", Dimension::Time)?;
    let span = t.span.start;
    let text = t.text;
    t.finish()?;
    let mut tl = build_timeline(scheme, d, field)
        .map_err(|e| ConfigError::new(K::InvalidValue, "timeline", e.to_string()).at(Some(line_col(text, span))))?;
    tl.gravity = gravity;
    tl.spin_t2 = spin_t2;
    Ok(tl)
}

fn sweep(t: &mut Table, dim: Dimension, default_points: usize) -> Result<Sweep, ConfigError> {
    let from = t.req_quantity("from", dim)?;
    let to = t.req_quantity("to", dim)?;
    let points = t.count("points", 1)?.unwrap_or(default_points);
    if !(to > from) && points > 1 {
        return Err(ConfigError::new(K::InvalidValue, t.key("to"), "sweep end must be above its start"));
    }
    Ok(Sweep { from, to, points })
}

struct Sections<'a> {
    text: &'a str,
    field: Option<Table<'a>>,
    initial: Option<Table<'a>>,
    timeline: Option<Table<'a>>,
}

impl<'a> Sections<'a> {
    fn missing(name: &str) -> ConfigError {
        ConfigError::new(K::MissingKey, name, format!("table [{name}] is required for this experiment"))
    }

    fn field(&mut self) -> Result<FieldModel, ConfigError> {
        parse_field(self.field.take().ok_or_else(|| Self::missing("field"))?)
    }

    fn initial(&mut self) -> Result<(GaussianState, f64), ConfigError> {
        parse_initial(self.initial.take().ok_or_else(|| Self::missing("initial"))?)
    }

    fn setup(&mut self) -> Result<Setup, ConfigError> {
        let field = self.field()?;
        let (initial, td0) = self.initial()?;
        let timeline = parse_timeline(self.timeline.take().ok_or_else(|| Self::missing("timeline"))?, field, td0)?;
        Ok(Setup { timeline, initial })
    }

    /// Error for a shared table the experiment does not use.
    fn unused(&self) -> Result<(), ConfigError> {
        if let Some(t) = [&self.field, &self.initial, &self.timeline].into_iter().flatten().next() {
            return Err(ConfigError::new(K::UnknownKey, t.name, "table is not used by this experiment")
                .at(Some(line_col(self.text, t.span.start))));
        }
        Ok(())
    }
}

/// Parse and validate scenario text; all quantities end up in SI.
pub fn parse_scenario(text: &str) -> Result<Scenario, ConfigError> {
    let raw: RawScenario = toml::from_str(text).map_err(|e| {
        let msg = e.message().to_string();
        let pos = e.span().map(|s| line_col(text, s.start));
        let (kind, key) = if msg.starts_with("unknown field") {
            (K::UnknownKey, backticked(&msg).unwrap_or_default().to_string())
        } else if msg.starts_with("missing field") {
            (K::MissingKey, backticked(&msg).unwrap_or_default().to_string())
        } else {
            (K::Syntax, String::new())
        };
        ConfigError::new(kind, key, msg.trim().to_string()).at(pos)
    })?;

    let top_pos = |v: &V| Some(line_col(text, v.span().start));
    let name = match &raw.name {
        Some(v) => match v.get_ref() {
            Value::String(s) if !s.is_empty() => s.clone(),
            _ => return Err(ConfigError::new(K::InvalidValue, "name", "expected a non-empty string").at(top_pos(v))),
        },
        None => return Err(ConfigError::new(K::MissingKey, "name", "required key is missing")),
    };
    let experiment = match &raw.experiment {
        Some(v) => {
            let s = v.get_ref().as_str().unwrap_or_default();
            Experiment::ALL.into_iter().find(|e| e.name() == s).ok_or_else(|| {
                let names: Vec<&str> = Experiment::ALL.iter().map(|e| e.name()).collect();
                ConfigError::new(
                    K::InvalidValue,
                    "experiment",
                    format!("unknown experiment {}, expected one of {}", v.get_ref(), names.join(", ")),
                )
                .at(top_pos(v))
            })?
        }
        None => return Err(ConfigError::new(K::MissingKey, "experiment", "required key is missing")),
    };
    let seed = match &raw.seed {
        Some(v) => match v.get_ref() {
            Value::Integer(i) if *i >= 0 => *i as u64,
            _ => return Err(ConfigError::new(K::InvalidValue, "seed", "expected a non-negative integer").at(top_pos(v))),
        },
        None => 0,
    };

    let mut output = OutputSpec { format: Format::Csv, path: None };
    if let Some(o) = raw.output {
        let mut t = Table::new(text, "output", o);
        if let Some(f) = t.choice("format", &[("csv", Format::Csv), ("json", Format::Json)])? {
            output.format = f;
        }
        output.path = t.string("path")?.map(|(s, _)| PathBuf::from(s));
        t.finish()?;
    }

    let mut specific = None;
    let experiment_tables = [
        (Experiment::Simulate, raw.simulate, "simulate"),
        (Experiment::Scan, raw.scan, "scan"),
        (Experiment::Optimize, raw.optimize, "optimize"),
        (Experiment::Fit, raw.fit, "fit"),
        (Experiment::SingleKick, raw.single_kick, "single_kick"),
        (Experiment::HalfVsFull, raw.half_vs_full, "half_vs_full"),
        (Experiment::Jitter, raw.jitter, "jitter"),
        (Experiment::Feasibility, raw.feasibility, "feasibility"),
    ];
    for (e, table, tname) in experiment_tables {
        if let Some(tb) = table {
            if e != experiment {
                return Err(ConfigError::new(
                    K::UnknownKey,
                    tname,
                    format!("table [{tname}] does not apply to experiment {}", experiment.name()),
                )
                .at(Some(line_col(text, tb.span().start))));
            }
            specific = Some(Table::new(text, tname, tb));
        }
    }
    let empty = |name: &'static str| Table {
        text,
        name,
        span: 0..0,
        entries: BTreeMap::new(),
        allowed: Vec::new(),
    };
    let mut t = specific.unwrap_or_else(|| empty(experiment.name()));
    let mut sec = Sections {
        text,
        field: raw.field.map(|x| Table::new(text, "field", x)),
        initial: raw.initial.map(|x| Table::new(text, "initial", x)),
        timeline: raw.timeline.map(|x| Table::new(text, "timeline", x)),
    };

    let parameters = match experiment {
        Experiment::Simulate => {
            let setup = sec.setup()?;
            let samples_per_segment = t.count("samples_per_segment", 1)?.unwrap_or(16);
            let fringe_points = t.count("fringe_points", 4)?.unwrap_or(64);
            Parameters::Simulate { setup, samples_per_segment, fringe_points }
        }
        Experiment::Scan => {
            let setup = sec.setup()?;
            let variable = t.req_choice(
                "variable",
                &[
                    ("phi", ScanVariable::Phi),
                    ("Td1", ScanVariable::Td1),
                    ("Td", ScanVariable::Td),
                    ("reverse", ScanVariable::Reverse),
                ],
            )?;
            let dim = if variable == ScanVariable::Phi { Dimension::Angle } else { Dimension::Time };
            let sweep = sweep(&mut t, dim, 101)?;
            let readout_phase = t.quantity("readout_phase", Dimension::Angle)?;
            let fit = t.boolean("fit")?.unwrap_or(false);
            Parameters::Scan { setup, scan: ScanSpec { variable, sweep, readout_phase, fit } }
        }
        Experiment::Optimize => {
            let setup = sec.setup()?;
            let free = match t.get("free").cloned() {
                Some(v) => {
                    let Value::Array(items) = v.get_ref() else {
                        return Err(ConfigError::new(K::InvalidValue, "optimize.free", "expected an array of names")
                            .at(top_pos(&v)));
                    };
                    items
                        .iter()
                        .map(|i| match i.as_str() {
                            Some("T2") => Ok(FreeParam::T2),
                            Some("T3") => Ok(FreeParam::T3),
                            Some("T4") => Ok(FreeParam::T4),
                            Some("Td2") => Ok(FreeParam::Td2),
                            _ => Err(ConfigError::new(
                                K::InvalidValue,
                                "optimize.free",
                                format!("unknown free parameter {i}, expected T2, T3, T4 or Td2"),
                            )
                            .at(top_pos(&v))),
                        })
                        .collect::<Result<Vec<_>, _>>()?
                }
                None => vec![FreeParam::T3, FreeParam::T4],
            };
            let constraint = t
                .choice("constraint", &[("fixed_total", Constraint::FixedTotal), ("none", Constraint::None)])?
                .unwrap_or(Constraint::FixedTotal);
            let objective = t
                .choice("objective", &[("hd_penalty", Objective::HdPenalty), ("overlap", Objective::OverlapMagnitude)])?
                .unwrap_or(Objective::HdPenalty);
            let grid_points = t.count("grid_points", 2)?.unwrap_or(5);
            let threshold = t.number("threshold")?.unwrap_or(1e-6);
            let t2_curve = t.quantity_list("t2_curve", Dimension::Time)?.unwrap_or_default();
            let degree = t.count("degree", 0)?.unwrap_or(2);
            Parameters::Optimize {
                setup,
                optimize: OptimizeSpec { free, constraint, objective, grid_points, threshold, t2_curve, degree },
            }
        }
        Experiment::Fit => {
            sec.unused()?;
            let (input, _) = t.string("input")?.ok_or_else(|| {
                ConfigError::new(K::MissingKey, "fit.input", "required key is missing")
            })?;
            let model = t
                .choice("model", &[("sine", FitKind::Sine), ("gaussian_sine", FitKind::GaussianSine)])?
                .unwrap_or(FitKind::Sine);
            let envelope_center = match t.get("envelope_center").cloned() {
                None => Some(0.0),
                Some(v) => match v.get_ref() {
                    Value::String(s) if s == "free" => None,
                    Value::Integer(i) => Some(*i as f64),
                    Value::Float(f) => Some(*f),
                    other => {
                        return Err(ConfigError::new(
                            K::InvalidValue,
                            "fit.envelope_center",
                            format!("expected a number in data units or \"free\", got {other}"),
                        )
                        .at(top_pos(&v)))
                    }
                },
            };
            let k2 = t.number("k2")?;
            let k1_hint = t.number("k1_hint")?;
            let k2_hint = t.number("k2_hint")?;
            let phase_hint = k1_hint.map(|k1| (k1, k2_hint.or(k2).unwrap_or(0.0)));
            Parameters::Fit(FitSpec { input: PathBuf::from(input), model, envelope_center, k2, phase_hint })
        }
        Experiment::SingleKick => {
            let (initial, _) = sec.initial()?;
            sec.unused()?;
            let t1 = t.positive("T1", Dimension::Time)?;
            let from = t.req_quantity("from", Dimension::Velocity)?;
            let to = t.req_quantity("to", Dimension::Velocity)?;
            let points = t.count("points", 8)?.unwrap_or(81);
            if !(to > from) {
                return Err(ConfigError::new(K::InvalidValue, "single_kick.to", "sweep end must be above its start"));
            }
            let readout_phase = t.quantity("readout_phase", Dimension::Angle)?;
            let gravity = t.boolean("gravity")?.unwrap_or(true);
            Parameters::SingleKick { initial, t1, sweep: Sweep { from, to, points }, readout_phase, gravity }
        }
        Experiment::HalfVsFull => {
            let setup = sec.setup()?;
            let sweep = sweep(&mut t, Dimension::Time, 161)?;
            let readout_phase = t.quantity("readout_phase", Dimension::Angle)?.unwrap_or(0.0);
            Parameters::HalfVsFull { setup, sweep, readout_phase }
        }
        Experiment::Jitter => {
            let setup = sec.setup()?;
            let current_rel_sigma = t.number("current_rel_sigma")?.unwrap_or(0.0);
            let timing_sigma = t.quantity("timing_sigma", Dimension::Time)?.unwrap_or(0.0);
            if current_rel_sigma < 0.0 {
                return Err(ConfigError::new(K::InvalidValue, "jitter.current_rel_sigma", "must be >= 0"));
            }
            let shots = t.count("shots", 2)?.unwrap_or(200);
            Parameters::Jitter { setup, jitter: JitterSpec { current_rel_sigma, timing_sigma }, shots }
        }
        Experiment::Feasibility => {
            sec.unused()?;
            let mut object = MacroObjectSpec::default();
            if let Some(n) = t.number("n_atoms")? {
                object.n_atoms = n;
            }
            if let Some(m) = t.quantity("atom_mass", Dimension::Mass)? {
                object.atom_mass = m;
            }
            if let Some(d) = t.quantity("density", Dimension::Density)? {
                object.density = d;
            }
            if let Some(s) = t.number("spin_moment")? {
                object.spin_moment = s;
            }
            if let Some(f) = t.quantity("trap_frequency", Dimension::Frequency)? {
                object.trap_omega = 2.0 * std::f64::consts::PI * f;
            }
            if let Some(tc) = t.quantity("spin_coherence_time", Dimension::Time)? {
                object.spin_coherence_time = tc;
            }
            let current = t.quantity("wire_current", Dimension::Current)?.unwrap_or(1.0);
            let width = t.quantity("wire_width", Dimension::Length)?.unwrap_or(1e-6);
            let thickness = t.quantity("wire_thickness", Dimension::Length)?.unwrap_or(1e-6);
            let distance = t.quantity("distance", Dimension::Length)?.unwrap_or(1e-6);
            let times = t.quantity_list("times", Dimension::Time)?.unwrap_or_else(|| vec![1e-3, 10e-3, 0.1, 0.5]);
            // the object sits at the origin, `distance` below the wire's lower surface
            let wire = FieldModel::new(FieldSource::RectWire {
                current,
                width,
                height: thickness,
                center: WirePosition::on_axis(distance + 0.5 * thickness),
            });
            Parameters::Feasibility(FeasibilitySpec { object, wire, distance, times })
        }
    };
    t.finish()?;
    Ok(Scenario { name, experiment, seed, output, parameters })
}

/// Read and parse a scenario file. A relative fit input is resolved against
/// the file's directory.
pub fn load_scenario(path: &Path) -> Result<Scenario, ConfigError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| ConfigError::new(K::Io, "", format!("cannot read {}: {e}", path.display())))?;
    let mut s = parse_scenario(&text)?;
    if let Parameters::Fit(f) = &mut s.parameters {
        if f.input.is_relative() {
            if let Some(dir) = path.parent() {
                f.input = dir.join(&f.input);
            }
        }
    }
    Ok(s)
}
