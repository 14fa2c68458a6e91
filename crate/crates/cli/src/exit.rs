use std::fmt;

use slim_core::SlimError;

/// A command failure tagged with its exit code class.
#[derive(Debug)]
pub enum Failure {
    /// A check ran and failed, or training broke down (exit 1).
    Check(anyhow::Error),
    /// Bad flags or configuration values (exit 2).
    Config(anyhow::Error),
    /// Missing or unreadable inputs, unwritable outputs (exit 3).
    Io(anyhow::Error),
}

impl Failure {
    pub fn code(&self) -> u8 {
        match self {
            Failure::Check(_) => 1,
            Failure::Config(_) => 2,
            Failure::Io(_) => 3,
        }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let e = match self {
            Failure::Check(e) | Failure::Config(e) | Failure::Io(e) => e,
        };
        write!(f, "{e:#}")
    }
}

impl From<SlimError> for Failure {
    fn from(e: SlimError) -> Self {
        if e.is_io() {
            Failure::Io(e.into())
        } else if matches!(e, SlimError::Config(_)) {
            Failure::Config(e.into())
        } else {
            Failure::Check(e.into())
        }
    }
}

pub type Outcome<T = ()> = Result<T, Failure>;

/// Context helpers for filesystem writes.
pub trait IoContext<T> {
    fn io_context(self, what: impl FnOnce() -> String) -> Outcome<T>;
}

impl<T> IoContext<T> for std::io::Result<T> {
    fn io_context(self, what: impl FnOnce() -> String) -> Outcome<T> {
        self.map_err(|e| Failure::Io(anyhow::Error::new(e).context(what())))
    }
}
