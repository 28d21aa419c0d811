use std::path::PathBuf;

/// Errors raised anywhere in the library.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("missing file: {}", .0.display())]
    MissingFile(PathBuf),

    #[error("i/o error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed csv in {}: {source}", path.display())]
    Csv {
        path: PathBuf,
        #[source]
        source: csv::Error,
    },

    #[error("malformed json in {}: {source}", path.display())]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },

    /// Shares that should add to one do not. `entity` names the offending row.
    #[error("share-sum violation in {entity}: sum is {sum}")]
    ShareSum { entity: String, sum: f64 },

    #[error("{entity}: {field} = {value} is out of range ({expected})")]
    OutOfRange {
        entity: String,
        field: &'static str,
        value: f64,
        expected: &'static str,
    },

    #[error("labor-share regularity violated in {country}: services {services} <= goods {goods}")]
    LaborShareOrder {
        country: String,
        services: f64,
        goods: f64,
    },

    #[error("invalid calibration: {0}")]
    Invalid(String),

    #[error("missing item {0} in price-change map")]
    MissingItem(String),

    #[error("expected {expected} groups, found {found}")]
    GroupCount { expected: usize, found: usize },

    #[error("essentials share gap is zero; the wedge cannot be closed by a subsidy")]
    ZeroShareGap,

    #[error("internal identity violated: {what} (difference {diff:e})")]
    Identity { what: &'static str, diff: f64 },

    #[error("household steady state did not converge: {0}")]
    Steady(String),

    #[error("Jacobian matrix is singular (condition estimate {condition:e})")]
    Singular { condition: f64 },

    /// The policy rule violates the long-run Taylor principle.
    #[error("indeterminate equilibrium: long-run inflation response {response} <= 1")]
    Indeterminate { response: f64 },

    #[error("quasi-Newton did not converge after {iterations} iterations (residual {residual:e})")]
    NoConvergence { iterations: usize, residual: f64 },

    #[error("cache entry {0} is stale or corrupt")]
    Cache(String),

    #[error("unknown {kind} '{name}'")]
    Unknown { kind: &'static str, name: String },
}

pub type Result<T> = std::result::Result<T, Error>;

/// Coarse error categories, used for process exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    /// Bad input values or malformed files
    Validation,
    /// Files that cannot be read or written
    Io,
    /// A well-posed model the solver could not handle
    Solver,
}

impl Error {
    pub fn class(&self) -> ErrorClass {
        match self {
            Error::MissingFile(_) | Error::Io { .. } | Error::Cache(_) => ErrorClass::Io,
            Error::Csv { source, .. } if source.is_io_error() => ErrorClass::Io,
            Error::Json { source, .. } if source.is_io() => ErrorClass::Io,
            Error::Singular { .. }
            | Error::Indeterminate { .. }
            | Error::NoConvergence { .. }
            | Error::Steady(_)
            | Error::Identity { .. } => ErrorClass::Solver,
            _ => ErrorClass::Validation,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn classes() {
        assert_eq!(Error::MissingFile("x".into()).class(), ErrorClass::Io);
        assert_eq!(
            Error::Indeterminate { response: 0.5 }.class(),
            ErrorClass::Solver
        );
        assert_eq!(Error::Invalid("x".into()).class(), ErrorClass::Validation);
        let bad = serde_json::from_str::<f64>("{").unwrap_err();
        let e = Error::Json {
            path: "x".into(),
            source: bad,
        };
        assert_eq!(e.class(), ErrorClass::Validation);
    }
}
