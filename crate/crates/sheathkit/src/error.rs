use thiserror::Error;

/// Every failure mode surfaced by the library.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid argument `{field}`: {reason}")]
    InvalidArgument { field: &'static str, reason: String },

    #[error("electron density is not positive at psi = {psi}")]
    NonPositiveDensity { psi: f64 },

    #[error("quadrature did not converge on [{a}, {b}] (error estimate {error:e})")]
    QuadratureFailure { a: f64, b: f64, error: f64 },

    #[error("well potential slope at zero is {q_prime_zero:e}; neutrality does not hold")]
    InconsistentWell { q_prime_zero: f64 },

    #[error("curvature constant alpha = {alpha:e} is not positive (Bohm condition numerically violated)")]
    CurvatureDegenerate { alpha: f64 },

    #[error("no convergence after {iterations} iterations (residual {residual:e})")]
    NoConvergence { iterations: usize, residual: f64 },

    #[error("equilibrium solution pinned to the box constraint at node {node}")]
    ConstraintViolation { node: usize },

    #[error("singular tridiagonal system at row {row}")]
    SingularSystem { row: usize },

    #[error("potential value {value} outside the tabulated electron range [{lo}, {hi}]")]
    RangeExceeded { value: f64, lo: f64, hi: f64 },

    #[error("potential history does not cover t = {t} (covered [{start}, {end}])")]
    HistoryGap { t: f64, start: f64, end: f64 },

    #[error("characteristic through (x = {x}, v = {v}) did not exit before horizon {horizon}")]
    HorizonExceeded { x: f64, v: f64, horizon: f64 },

    #[error("point (x = {x}, v = {v}) lies on the separatrix")]
    SeparatrixPoint { x: f64, v: f64 },

    #[error("initial datum support spans fewer than 4 cells along {axis}")]
    UnresolvedSupport { axis: &'static str },

    #[error("fluctuation reached the velocity truncation edge (|h| = {value:e})")]
    EdgeMass { value: f64 },

    #[error("Picard iteration diverged; increments {increments:?}")]
    PicardDiverged { increments: Vec<f64> },

    #[error("delayed Gronwall condition violated: alpha * T = {product} >= 1")]
    ConditionViolated { product: f64 },

    #[error("delta_r = {delta_r} is not positive for r = {r}")]
    NoThreshold { r: f64, delta_r: f64 },

    #[error("norm vanished before t = {window_start}; extinct in finite time")]
    EmptyTail { window_start: f64 },
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid(field: &'static str, reason: impl Into<String>) -> Error {
    Error::InvalidArgument {
        field,
        reason: reason.into(),
    }
}
