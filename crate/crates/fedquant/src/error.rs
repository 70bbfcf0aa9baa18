use thiserror::Error;

/// Failure categories used across the crate. Each maps to a process exit
/// code so the CLI can distinguish bad input from runtime breakage.
#[derive(Debug, Error)]
pub enum Error {
    /// Invalid configuration, parameters out of range, or malformed input.
    #[error("config error: {0}")]
    Config(String),

    /// Numerical failure at runtime: divergence, non-finite state, failed
    /// root bracketing, degenerate normalizers.
    #[error("numeric failure: {0}")]
    Numeric(String),

    /// Protocol violation in the communication layer: duplicate or missing
    /// round messages, out-of-order updates.
    #[error("protocol violation: {0}")]
    Protocol(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn numeric(msg: impl Into<String>) -> Self {
        Error::Numeric(msg.into())
    }

    pub fn protocol(msg: impl Into<String>) -> Self {
        Error::Protocol(msg.into())
    }

    /// Exit code for the CLI: 2 invalid input, 3 runtime failure, 4 i/o.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::Numeric(_) | Error::Protocol(_) => 3,
            Error::Io(_) => 4,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes_match_cli_contract() {
        assert_eq!(Error::config("x").exit_code(), 2);
        assert_eq!(Error::numeric("x").exit_code(), 3);
        assert_eq!(Error::protocol("x").exit_code(), 3);
        let io = Error::from(std::io::Error::new(std::io::ErrorKind::NotFound, "gone"));
        assert_eq!(io.exit_code(), 4);
    }
}
