use alloc::string::String;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    Argument(String),
    #[error("non-finite value while evaluating {what} at t={t}")]
    NonFinite { what: String, t: f64 },
    #[error("missing gradient for {0}")]
    MissingGradient(String),
    #[error("fixed-point iteration stopped contracting after {iterations} iterations (last gap {last_gap:e}); interval [{start}, {end}] is too long, try a shorter one")]
    IntervalTooLong {
        start: f64,
        end: f64,
        iterations: usize,
        last_gap: f64,
    },
    #[error(
        "corrector gradient {lipschitz:.3} exceeds 1/2 on [{start}, {end}]; shorten the interval"
    )]
    LipschitzTooLarge {
        start: f64,
        end: f64,
        lipschitz: f64,
    },
    #[error("fixed-point distances stopped decreasing at iteration {iteration}; horizon {horizon} is too long, try {suggested}")]
    HorizonTooLong {
        horizon: f64,
        suggested: f64,
        iteration: usize,
    },
    #[error("field is not mean-zero on the torus (mean {0:e})")]
    NotMeanZero(f64),
}

pub(crate) fn arg<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Argument(msg.into()))
}
