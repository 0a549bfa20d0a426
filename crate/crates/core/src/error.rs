use alloc::string::String;
use core::fmt;

pub type Result<T> = core::result::Result<T, Error>;

/// Errors raised by the core library.
#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// A numeric argument was outside the domain of the function.
    Domain(String),
    /// The root finder could not bracket the calibrated noise scale.
    Calibration(String),
    /// A system or trial configuration violates its invariants.
    Config(String),
    /// The requested noise variance cannot satisfy the privacy constraint.
    Infeasible(String),
    /// The operation is not defined for the given parameters.
    Unsupported(String),
    /// Input too large for exhaustive enumeration.
    Size { n: usize, max: usize },
    /// A matrix was singular or too badly conditioned.
    Conditioning(String),
    /// A rejection sampler ran out of attempts.
    Sampling(String),
    /// Fewer samples than the estimator needs.
    InsufficientSamples { needed: usize, got: usize },
    /// An input vector is outside the unit ball.
    InputDomain { norm: f64 },
    /// Fewer Shamir shares than the reconstruction threshold.
    InsufficientShares { needed: usize, got: usize },
    /// Shares belonging to different secrets were mixed.
    ShareLabel,
    /// Two shares were evaluated at the same point.
    DuplicatePoint(u64),
    /// The prime field is too small for the requested number of shares.
    FieldTooSmall { q: u64, n: usize },
    /// The grid oracle found no feasible point.
    Oracle(String),
    /// Malformed wire bytes.
    Decode(String),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Domain(m) => write!(f, "domain error: {m}"),
            Error::Calibration(m) => write!(f, "calibration error: {m}"),
            Error::Config(m) => write!(f, "configuration error: {m}"),
            Error::Infeasible(m) => write!(f, "infeasible: {m}"),
            Error::Unsupported(m) => write!(f, "unsupported: {m}"),
            Error::Size { n, max } => write!(f, "size {n} exceeds enumeration limit {max}"),
            Error::Conditioning(m) => write!(f, "conditioning error: {m}"),
            Error::Sampling(m) => write!(f, "sampling error: {m}"),
            Error::InsufficientSamples { needed, got } => {
                write!(f, "need at least {needed} samples, got {got}")
            }
            Error::InputDomain { norm } => write!(f, "input norm {norm} exceeds the unit ball"),
            Error::InsufficientShares { needed, got } => {
                write!(f, "need {needed} shares to reconstruct, got {got}")
            }
            Error::ShareLabel => f.write_str("shares belong to different secrets"),
            Error::DuplicatePoint(x) => write!(f, "duplicate evaluation point {x}"),
            Error::FieldTooSmall { q, n } => write!(f, "field of order {q} cannot hold {n} shares"),
            Error::Oracle(m) => write!(f, "grid oracle: {m}"),
            Error::Decode(m) => write!(f, "decode error: {m}"),
        }
    }
}

impl core::error::Error for Error {}
