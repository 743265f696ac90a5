use std::fmt;
use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Which half of the fractional step failed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Deformation,
    Flow,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Stage::Deformation => f.write_str("deformation"),
            Stage::Flow => f.write_str("flow"),
        }
    }
}

/// One failed check from problem validation.
#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct Violation {
    pub field: String,
    pub message: String,
}

impl Violation {
    pub fn new(field: impl Into<String>, message: impl Into<String>) -> Self {
        Self { field: field.into(), message: message.into() }
    }
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.field, self.message)
    }
}

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("degenerate point {point}: {reason}")]
    DegeneratePoint { point: usize, reason: String },
    #[error("inverted deformation at point {point} (det F = {det})")]
    InvertedElement { point: usize, det: f64 },
    #[error("porosity {phi} out of (0, 1) at point {point}")]
    PorosityOutOfRange { point: usize, phi: f64 },
    #[error("invalid retention parameters: {0}")]
    InvalidRetention(String),
    #[error("non-positive storage coefficient {value} at point {point}")]
    IllPosedStorage { point: usize, value: f64 },
    #[error("{stage} stage did not converge in {iterations} iterations; residual history {history:?}")]
    NonConvergence { stage: Stage, iterations: usize, history: Vec<f64> },
    #[error("singular tangent: {0}")]
    SingularTangent(String),
    #[error("finite-difference perturbation underflow")]
    PerturbationUnderflow,
    #[error("invalid geometry: {0}")]
    Geometry(String),
    #[error("problem validation failed:\n{}", format_violations(.0))]
    Validation(Vec<Violation>),
    #[error("{path}: {message}")]
    Schema { path: String, message: String },
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: malformed snapshot: {message}")]
    Snapshot { path: PathBuf, message: String },
}

fn format_violations(v: &[Violation]) -> String {
    v.iter().map(|x| format!("  - {x}")).collect::<Vec<_>>().join("\n")
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    /// True when a smaller time step may cure the failure.
    pub fn is_step_rejection(&self) -> bool {
        matches!(
            self,
            Error::NonConvergence { .. }
                | Error::InvertedElement { .. }
                | Error::PorosityOutOfRange { .. }
                | Error::SingularTangent(_)
        )
    }
}
