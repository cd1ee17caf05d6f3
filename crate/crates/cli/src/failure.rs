//! Process exit codes.

use std::fmt;

use secure_core::Error;

pub const EXIT_USAGE: i32 = 2;
pub const EXIT_IO: i32 = 3;
pub const EXIT_NUMERIC: i32 = 4;
pub const EXIT_VERIFICATION: i32 = 5;

/// Failures raised by the CLI itself rather than by the library.
#[derive(Debug)]
pub enum Failure {
    Usage(String),
    Io(String),
    Verification(String),
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Failure::Usage(m) | Failure::Io(m) | Failure::Verification(m) => f.write_str(m),
        }
    }
}

impl std::error::Error for Failure {}

pub fn library_code(e: &Error) -> i32 {
    match e {
        Error::Shape { .. } | Error::Domain { .. } | Error::InvalidConfig { .. } => EXIT_USAGE,
        Error::Format { .. } | Error::Video { .. } | Error::Io { .. } | Error::Json { .. } => EXIT_IO,
        Error::NonFinite { .. } => EXIT_NUMERIC,
    }
}

/// Exit code for the first recognised error in the chain; 1 otherwise.
pub fn exit_code(err: &anyhow::Error) -> i32 {
    for cause in err.chain() {
        if let Some(f) = cause.downcast_ref::<Failure>() {
            return match f {
                Failure::Usage(_) => EXIT_USAGE,
                Failure::Io(_) => EXIT_IO,
                Failure::Verification(_) => EXIT_VERIFICATION,
            };
        }
        if let Some(e) = cause.downcast_ref::<Error>() {
            return library_code(e);
        }
        if cause.downcast_ref::<std::io::Error>().is_some() {
            return EXIT_IO;
        }
    }
    1
}
