use tcct_core::Error as CoreError;
use thiserror::Error;

/// Process exit statuses. Clap reports usage errors itself with status 2.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum ExitStatus {
    Ok = 0,
    Internal = 1,
    InvalidVariant = 3,
    DataError = 4,
    ConfigError = 5,
    Diverged = 6,
    IoError = 7,
    CheckFailed = 8,
}

#[derive(Debug, Error)]
pub enum CliError {
    #[error("unknown variant `{0}`; expected one of Informer, Informer+, TCCT_I..TCCT_VI")]
    InvalidVariant(String),
    #[error("config: {0}")]
    Config(String),
    #[error("data: {0}")]
    Data(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("{0} invariant suite(s) failed")]
    CheckFailed(usize),
    #[error(transparent)]
    Core(#[from] CoreError),
    #[error("{0}")]
    Internal(String),
}

impl CliError {
    pub fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }

    pub fn status(&self) -> ExitStatus {
        match self {
            CliError::InvalidVariant(_) => ExitStatus::InvalidVariant,
            CliError::Config(_) => ExitStatus::ConfigError,
            CliError::Data(_) => ExitStatus::DataError,
            CliError::Io { .. } => ExitStatus::IoError,
            CliError::CheckFailed(_) => ExitStatus::CheckFailed,
            CliError::Internal(_) => ExitStatus::Internal,
            CliError::Core(e) => match e {
                CoreError::Config(_) | CoreError::Pyramid(_) => ExitStatus::ConfigError,
                CoreError::Ingest(_) => ExitStatus::DataError,
                CoreError::Diverged { .. } | CoreError::Train(_) => ExitStatus::Diverged,
                CoreError::Io(_) => ExitStatus::IoError,
                _ => ExitStatus::Internal,
            },
        }
    }
}

impl From<csv::Error> for CliError {
    fn from(e: csv::Error) -> Self {
        CliError::Internal(format!("csv: {e}"))
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Internal(format!("json: {e}"))
    }
}

pub type CliResult<T> = Result<T, CliError>;

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn statuses_are_distinct() {
        let all = [
            CliError::InvalidVariant("x".into()).status(),
            CliError::Config("x".into()).status(),
            CliError::Data("x".into()).status(),
            CliError::io("p", std::io::Error::other("x")).status(),
            CliError::CheckFailed(1).status(),
            CliError::Internal("x".into()).status(),
        ];
        for (i, a) in all.iter().enumerate() {
            assert_ne!(*a as u8, 0);
            assert_ne!(*a as u8, 2, "2 is reserved for usage errors");
            for b in &all[i + 1..] {
                assert_ne!(a, b);
            }
        }
        let diverged = CliError::Core(CoreError::Diverged {
            reason: "x".into(),
            history: vec![],
        });
        assert_eq!(diverged.status(), ExitStatus::Diverged);
    }
}
