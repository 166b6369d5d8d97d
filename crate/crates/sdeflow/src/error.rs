use std::path::PathBuf;

use serde_json::{json, Value};

/// Failures of a CLI run, each mapped to an exit code.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    /// The config (or a file it references) is malformed or inconsistent.
    #[error("config error at {field}: {message}")]
    Config { field: String, message: String },
    /// A numerical routine refused or failed.
    #[error("{experiment}: {source}")]
    Numerical {
        experiment: String,
        #[source]
        source: sdeflow_core::Error,
    },
    #[error("cannot access {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed {what}: {message}")]
    Format { what: String, message: String },
}

impl CliError {
    pub fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        CliError::Config {
            field: field.into(),
            message: message.into(),
        }
    }

    pub fn format(what: impl Into<String>, message: impl Into<String>) -> Self {
        CliError::Format {
            what: what.into(),
            message: message.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.into(),
            source,
        }
    }

    /// Wraps a library error raised while running `experiment`. Argument
    /// errors come from config values, so they count as config errors.
    pub fn from_core(experiment: &str, e: sdeflow_core::Error) -> Self {
        match e {
            sdeflow_core::Error::Argument(m) => {
                CliError::config(format!("experiment '{experiment}'"), m)
            }
            other => CliError::Numerical {
                experiment: experiment.to_string(),
                source: other,
            },
        }
    }

    /// 2 for config problems, 3 for numerical failures, 1 for IO.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config { .. } | CliError::Format { .. } => 2,
            CliError::Numerical { .. } => 3,
            CliError::Io { .. } => 1,
        }
    }

    /// Machine-readable diagnostic written to stderr.
    pub fn payload(&self) -> Value {
        match self {
            CliError::Config { field, message } => json!({
                "error": "config",
                "field": field,
                "message": message,
            }),
            CliError::Format { what, message } => json!({
                "error": "format",
                "what": what,
                "message": message,
            }),
            CliError::Io { path, source } => json!({
                "error": "io",
                "path": path.display().to_string(),
                "message": source.to_string(),
            }),
            CliError::Numerical { experiment, source } => {
                let mut v = core_payload(source);
                v["experiment"] = json!(experiment);
                v["message"] = json!(source.to_string());
                v
            }
        }
    }
}

fn core_payload(e: &sdeflow_core::Error) -> Value {
    use sdeflow_core::Error as E;
    match e {
        E::Argument(m) => json!({ "error": "argument", "detail": m }),
        E::NonFinite { what, t } => json!({ "error": "non_finite", "what": what, "t": t }),
        E::MissingGradient(what) => json!({ "error": "missing_gradient", "what": what }),
        E::IntervalTooLong {
            start,
            end,
            iterations,
            last_gap,
        } => json!({
            "error": "interval_too_long",
            "start": start,
            "end": end,
            "iterations": iterations,
            "last_gap": last_gap,
        }),
        E::LipschitzTooLarge {
            start,
            end,
            lipschitz,
        } => json!({
            "error": "lipschitz_too_large",
            "start": start,
            "end": end,
            "lipschitz": lipschitz,
        }),
        E::HorizonTooLong {
            horizon,
            suggested,
            iteration,
        } => json!({
            "error": "horizon_too_long",
            "horizon": horizon,
            "suggested": suggested,
            "iteration": iteration,
        }),
        E::NotMeanZero(mean) => json!({ "error": "not_mean_zero", "mean": mean }),
    }
}

pub type Result<T, E = CliError> = std::result::Result<T, E>;

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes_follow_the_error_class() {
        assert_eq!(CliError::config("x", "bad").exit_code(), 2);
        let arg = CliError::from_core("e", sdeflow_core::Error::Argument("dt".into()));
        assert_eq!(arg.exit_code(), 2);
        let num = CliError::from_core(
            "e",
            sdeflow_core::Error::HorizonTooLong {
                horizon: -1.0,
                suggested: -0.5,
                iteration: 4,
            },
        );
        assert_eq!(num.exit_code(), 3);
        assert_eq!(num.payload()["suggested"], json!(-0.5));
        assert_eq!(num.payload()["experiment"], json!("e"));
    }
}
