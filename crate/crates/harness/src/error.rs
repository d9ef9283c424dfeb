/// Harness failures, each mapped to a process exit code.
#[derive(Debug, thiserror::Error)]
pub enum HarnessError {
    /// A config field (named by key) is missing or invalid.
    #[error("config key `{key}`: {detail}")]
    Config { key: String, detail: String },
    /// Input data is missing or malformed.
    #[error("data: {0}")]
    Data(String),
    #[error(transparent)]
    Core(#[from] dprgc_core::Error),
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    /// A verification property failed.
    #[error("check failed: {0}")]
    Check(String),
}

pub type Result<T> = std::result::Result<T, HarnessError>;

impl HarnessError {
    pub fn exit_code(&self) -> i32 {
        match self {
            HarnessError::Config { .. } => 2,
            HarnessError::Data(_) | HarnessError::Io { .. } => 3,
            HarnessError::Core(e) if e.is_data() => 3,
            HarnessError::Core(e) if e.is_numerical() => 4,
            HarnessError::Core(_) => 2,
            HarnessError::Check(_) => 4,
        }
    }

    /// Short category name for the machine-readable error line.
    pub fn kind(&self) -> &'static str {
        match self.exit_code() {
            2 => "config",
            3 => "data",
            _ => "numerical",
        }
    }

    /// `error kind=<kind> code=<exit code> message=<text>` on one line.
    pub fn machine_line(&self) -> String {
        let msg = self.to_string().replace('\n', " ");
        format!("error kind={} code={} message={}", self.kind(), self.exit_code(), msg)
    }

    pub(crate) fn io(path: &std::path::Path, source: std::io::Error) -> Self {
        HarnessError::Io {
            path: path.display().to_string(),
            source,
        }
    }
}
