use alloc::string::String;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParam { name: &'static str, reason: String },
    #[error("interval set is empty along axis {axis}")]
    EmptySet { axis: usize },
    #[error("Gram matrix factorization failed (matrix not positive definite after jitter)")]
    FactorizationFailure,
    #[error("terminal set certification failed: {0}")]
    CertificationFailure(String),
    #[error("initial condition is infeasible for the robust horizon")]
    InfeasibleStart,
    #[error("assumption 2 monitor flagged a violation earlier in this session")]
    AssumptionViolated,
}

pub type Result<T> = core::result::Result<T, Error>;

pub(crate) fn invalid(name: &'static str, reason: impl Into<String>) -> Error {
    Error::InvalidParam {
        name,
        reason: reason.into(),
    }
}
