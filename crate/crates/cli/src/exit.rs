//! Failure classes and their process exit codes.

use thiserror::Error;

pub const EXIT_INTERNAL: i32 = 1;
pub const EXIT_INPUT: i32 = 2;
pub const EXIT_CONFIG: i32 = 3;
pub const EXIT_NUMERIC: i32 = 4;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("bad input: {0}")]
    Input(String),
}

/// Exit code of the first classified error in the chain.
pub fn exit_code(err: &anyhow::Error) -> i32 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<CliError>() {
            return match e {
                CliError::Config(_) => EXIT_CONFIG,
                CliError::Input(_) => EXIT_INPUT,
            };
        }
        if let Some(e) = cause.downcast_ref::<npnorm::Error>() {
            return match e {
                npnorm::Error::Numeric(_) | npnorm::Error::NonFinite(_) => EXIT_NUMERIC,
                npnorm::Error::Io { .. } | npnorm::Error::Corrupt { .. } | npnorm::Error::Json { .. } => EXIT_INPUT,
                npnorm::Error::Shape { .. } | npnorm::Error::InvalidArgument(_) => EXIT_INPUT,
            };
        }
        if cause.downcast_ref::<std::io::Error>().is_some() {
            return EXIT_INPUT;
        }
    }
    EXIT_INTERNAL
}
