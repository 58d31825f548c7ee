use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Errors produced anywhere in the laboratory.
///
/// Each variant maps onto one of the process exit codes used by the CLI, see
/// [`Error::exit_code`].
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite value in {layer}: {detail}")]
    Numeric { layer: String, detail: String },

    #[error("domain error: {0}")]
    Domain(String),

    #[error("degenerate basis: {0}")]
    DegenerateBasis(String),

    #[error("config error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("config error for key `{key}`: {msg}")]
    Config { key: String, msg: String },

    #[error("checkpoint has bad magic {found:?}, expected \"SWAC\"")]
    BadMagic { found: [u8; 4] },

    #[error("unsupported checkpoint version {0}")]
    BadVersion(u32),

    #[error("checkpoint checksum mismatch: stored {stored:#010x}, computed {computed:#010x}")]
    BadChecksum { stored: u32, computed: u32 },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("csv error: {0}")]
    Csv(String),

    #[error("{phase} phase failed: {source}")]
    Phase {
        phase: &'static str,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }

    pub(crate) fn config(key: impl Into<String>, msg: impl Into<String>) -> Self {
        Error::Config {
            key: key.into(),
            msg: msg.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn in_phase(self, phase: &'static str) -> Self {
        Error::Phase {
            phase,
            source: Box::new(self),
        }
    }

    /// Process exit code: 2 config, 3 numeric, 4 I/O.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Parse { .. }
            | Error::Config { .. }
            | Error::Domain(_)
            | Error::Shape(_)
            | Error::DegenerateBasis(_) => 2,
            Error::Numeric { .. } => 3,
            Error::BadMagic { .. }
            | Error::BadVersion(_)
            | Error::BadChecksum { .. }
            | Error::Io { .. }
            | Error::Csv(_) => 4,
            Error::Phase { source, .. } => source.exit_code(),
        }
    }
}
