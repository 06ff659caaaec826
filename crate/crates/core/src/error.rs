use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("grid mismatch: {0}")]
    GridMismatch(String),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("time {t} outside the covered range [{min}, {max}]")]
    OutOfRange { t: f64, min: f64, max: f64 },
    #[error("non-finite state at t = {t}")]
    NumericalOverflow { t: f64 },
    #[error("singular diffusion at t = {t}: QQ* is not invertible")]
    SingularDiffusion { t: f64 },
    #[error("Bihari bound exceeds quadrature cap {cap} (Psi(cap) = {psi_at_cap} < {target})")]
    BoundExceedsCap {
        cap: f64,
        psi_at_cap: f64,
        target: f64,
    },
    #[error("model does not declare a growth condition")]
    UnsupportedModel,
    #[error("{fraction} of paths exploded before the horizon {horizon}")]
    ExplosionBeforeHorizon { fraction: f64, horizon: f64 },
    #[error("tabulation box too small: Gaussian mass outside the box is {outside_mass}")]
    Coverage { outside_mass: f64 },
    #[error("Picard iteration does not contract (last ratios {ratios:?}); try a larger lambda")]
    Divergence { ratios: Vec<f64> },
    #[error("fixed point left the tabulation box at x = {x}")]
    BoxEscape { x: f64 },
    #[error("precondition failed: {0}")]
    Precondition(String),
    #[error("variance {variance} below the numerical floor while |D| = {derivative}")]
    InconsistentVariance { variance: f64, derivative: f64 },
    #[error("config error: {0}")]
    Config(String),
    #[error("io error: {0}")]
    Io(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
