use std::fmt;

use serde::{Deserialize, Serialize};

/// The closed set of failure classes every client sees.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ErrorCode {
    ConnectFailed,
    CommFailure,
    Timeout,
    NoSuchObject,
    NoSuchMethod,
    BadArgs,
    Reserved,
    OutOfRange,
    AppError,
}

impl ErrorCode {
    pub fn as_str(self) -> &'static str {
        match self {
            ErrorCode::ConnectFailed => "CONNECT_FAILED",
            ErrorCode::CommFailure => "COMM_FAILURE",
            ErrorCode::Timeout => "TIMEOUT",
            ErrorCode::NoSuchObject => "NO_SUCH_OBJECT",
            ErrorCode::NoSuchMethod => "NO_SUCH_METHOD",
            ErrorCode::BadArgs => "BAD_ARGS",
            ErrorCode::Reserved => "RESERVED",
            ErrorCode::OutOfRange => "OUT_OF_RANGE",
            ErrorCode::AppError => "APP_ERROR",
        }
    }

    /// Transport-level failures, as opposed to errors reported by a handler.
    pub fn is_transport(self) -> bool {
        matches!(
            self,
            ErrorCode::ConnectFailed | ErrorCode::CommFailure | ErrorCode::Timeout
        )
    }
}

impl fmt::Display for ErrorCode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// An error carrying exactly one [`ErrorCode`] and a human readable message.
///
/// This is also the wire representation of a failed reply.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, thiserror::Error)]
#[error("{code}: {message}")]
pub struct Error {
    pub code: ErrorCode,
    pub message: String,
}

impl Error {
    pub fn new(code: ErrorCode, message: impl Into<String>) -> Self {
        Error {
            code,
            message: message.into(),
        }
    }

    pub fn connect_failed(message: impl Into<String>) -> Self {
        Self::new(ErrorCode::ConnectFailed, message)
    }

    pub fn comm_failure(message: impl Into<String>) -> Self {
        Self::new(ErrorCode::CommFailure, message)
    }

    pub fn timeout(message: impl Into<String>) -> Self {
        Self::new(ErrorCode::Timeout, message)
    }

    pub fn no_such_object(message: impl Into<String>) -> Self {
        Self::new(ErrorCode::NoSuchObject, message)
    }

    pub fn no_such_method(message: impl Into<String>) -> Self {
        Self::new(ErrorCode::NoSuchMethod, message)
    }

    pub fn bad_args(message: impl Into<String>) -> Self {
        Self::new(ErrorCode::BadArgs, message)
    }

    pub fn reserved(message: impl Into<String>) -> Self {
        Self::new(ErrorCode::Reserved, message)
    }

    pub fn out_of_range(message: impl Into<String>) -> Self {
        Self::new(ErrorCode::OutOfRange, message)
    }

    pub fn app(message: impl Into<String>) -> Self {
        Self::new(ErrorCode::AppError, message)
    }

    /// JSON form used on stderr by the command line tools.
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).unwrap_or_else(|_| format!("{{\"code\":\"{}\"}}", self.code))
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::bad_args(e.to_string())
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Validates a name token: `[A-Za-z0-9_.-]+`.
pub fn is_name_token(s: &str) -> bool {
    !s.is_empty()
        && s
            .bytes()
            .all(|b| b.is_ascii_alphanumeric() || b == b'_' || b == b'.' || b == b'-')
}

pub fn check_name_token(what: &str, s: &str) -> Result<()> {
    if is_name_token(s) {
        Ok(())
    } else {
        Err(Error::bad_args(format!("invalid {what} name {s:?}")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn codes_serialize_screaming() {
        let e = Error::reserved("held by op2");
        assert_eq!(
            serde_json::to_string(&e).unwrap(),
            r#"{"code":"RESERVED","message":"held by op2"}"#
        );
        let back: Error = serde_json::from_str(r#"{"code":"NO_SUCH_METHOD","message":"x"}"#).unwrap();
        assert_eq!(back.code, ErrorCode::NoSuchMethod);
    }

    #[test]
    fn name_tokens() {
        assert!(is_name_token("fep_align1"));
        assert!(is_name_token("a.b-c_9"));
        assert!(!is_name_token(""));
        assert!(!is_name_token("a/b"));
        assert!(!is_name_token("a b"));
    }
}
