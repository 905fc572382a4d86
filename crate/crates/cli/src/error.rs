use serde::Serialize;
use sgi_core::SgiError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ConfigErrorKind {
    Syntax,
    UnknownKey,
    MissingKey,
    MissingUnit,
    UnitMismatch,
    UnknownUnit,
    NegativeDuration,
    InvalidValue,
    Io,
}

/// Scenario problem, located in the source text when possible.
#[derive(Debug, Clone, PartialEq, Serialize, thiserror::Error)]
#[error("{}", self.render())]
pub struct ConfigError {
    pub kind: ConfigErrorKind,
    /// dotted key path, empty when not tied to a key
    pub key: String,
    pub message: String,
    pub line: Option<usize>,
    pub column: Option<usize>,
}

impl ConfigError {
    pub fn new(kind: ConfigErrorKind, key: impl Into<String>, message: impl Into<String>) -> Self {
        Self { kind, key: key.into(), message: message.into(), line: None, column: None }
    }

    pub fn at(mut self, pos: Option<(usize, usize)>) -> Self {
        if let Some((l, c)) = pos {
            self.line = Some(l);
            self.column = Some(c);
        }
        self
    }

    fn render(&self) -> String {
        let loc = match (self.line, self.column) {
            (Some(l), Some(c)) => format!("line {l}, column {c}: "),
            _ => String::new(),
        };
        if self.key.is_empty() {
            format!("{loc}{}", self.message)
        } else {
            format!("{loc}{}: {}", self.key, self.message)
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(#[from] ConfigError),
    #[error("{0}")]
    Core(#[from] SgiError),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{0}")]
    Failed(String),
}

impl CliError {
    pub fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        CliError::Io { path: path.as_ref().display().to_string(), source }
    }

    /// 2 for anything the user can fix in the scenario, 3 for failures while running.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) | CliError::Core(SgiError::Config(_)) => 2,
            _ => 3,
        }
    }

    /// Machine-readable form written to stderr on failure.
    pub fn to_json(&self) -> serde_json::Value {
        let kind = match self {
            CliError::Config(e) => serde_json::to_value(e.kind).unwrap_or_default(),
            CliError::Core(SgiError::Config(_)) => "invalid_value".into(),
            CliError::Core(SgiError::Domain(_)) => "domain".into(),
            CliError::Core(SgiError::Unsupported(_)) => "unsupported".into(),
            CliError::Core(SgiError::Numerical(_)) => "numerical".into(),
            CliError::Io { .. } => "io".into(),
            CliError::Failed(_) => "failed".into(),
        };
        let mut obj = serde_json::json!({
            "kind": kind,
            "message": self.to_string(),
            "exit_code": self.exit_code(),
        });
        if let CliError::Config(e) = self {
            obj["key"] = e.key.clone().into();
            obj["line"] = serde_json::to_value(e.line).unwrap_or_default();
            obj["column"] = serde_json::to_value(e.column).unwrap_or_default();
        }
        serde_json::json!({ "error": obj })
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;
