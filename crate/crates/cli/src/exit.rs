//! Mapping of failures to process exit codes.

use std::fmt;
use std::process::ExitCode;

use stampnet::Error;

pub const VALIDATION: u8 = 2;
pub const NUMERIC: u8 = 3;
pub const COMPATIBILITY: u8 = 4;
const OTHER: u8 = 1;

/// A user-supplied value failed validation; exits with code 2.
#[derive(Debug)]
pub struct Invalid(pub String);

impl fmt::Display for Invalid {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "invalid configuration: {}", self.0)
    }
}

impl std::error::Error for Invalid {}

pub fn code_for(err: &anyhow::Error) -> ExitCode {
    for cause in err.chain() {
        if cause.is::<Invalid>() {
            return ExitCode::from(VALIDATION);
        }
        if let Some(e) = cause.downcast_ref::<Error>() {
            return ExitCode::from(match e {
                Error::Config(_) => VALIDATION,
                Error::Numeric(_) => NUMERIC,
                Error::Dimension(_) => COMPATIBILITY,
                _ => OTHER,
            });
        }
    }
    ExitCode::from(OTHER)
}
