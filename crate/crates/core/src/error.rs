use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid parameters: {0}")]
    InvalidParams(String),
    #[error("series did not converge after {terms} terms")]
    NonConvergence { terms: usize },
    #[error("integral diverges at theta = 0 (exponent {exponent})")]
    DivergentIntegral { exponent: f64 },
    #[error("ill-conditioned solve (residual {residual:e})")]
    IllConditioned { residual: f64 },
    #[error("root scan found {found} of {wanted} roots below nu = {nu_max}")]
    RootScanExhausted { found: usize, wanted: usize, nu_max: f64 },
    #[error("right-hand side has kernel projection {projection:e}")]
    ObstructedRHS { projection: f64 },
    #[error("nu = {nu} is not a spectral parameter")]
    NotAtRoot { nu: f64 },
    #[error("rank mismatch: {0}")]
    RankMismatch(String),
    #[error("leading coefficient is singular")]
    SingularLeadingTerm,
    #[error("derivative of a log-only term at rho^0")]
    NegativePowerProduced,
    #[error("truncation order {have} too low, need {need}")]
    TruncationInsufficient { have: usize, need: usize },
    #[error("lambda = {0} outside (-1, 1)")]
    LambdaOutOfRange(f64),
    #[error("hypersurfaces are not transverse")]
    NonTransverse,
    #[error("theta0 = {0} is not pi/2")]
    NotHalfPi(f64),
    #[error("order {gamma} hits a spectral parameter of the tracefree operator")]
    IndicialRootHit { gamma: f64 },
    #[error("consistency check failed: {0}")]
    ConsistencyFailure(String),
    #[error("obstructed at order n (max |K| = {norm:e})")]
    Obstructed { norm: f64, modes: Vec<crate::rhoseries::ModeEntry> },
    #[error("config: {0}")]
    Config(String),
}

pub type Result<T> = std::result::Result<T, Error>;
