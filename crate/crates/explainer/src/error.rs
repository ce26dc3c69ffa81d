use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{what}: expected magic {expected:#010x}, found {actual:#010x}")]
    Format {
        what: &'static str,
        expected: u32,
        actual: u32,
    },
    #[error("{what}: needs {expected} bytes, found {actual}")]
    Length {
        what: &'static str,
        expected: usize,
        actual: usize,
    },
    #[error("inconsistent files: {0}")]
    Consistency(String),
    #[error("unsupported format version {found} (expected {expected})")]
    Version { expected: u32, found: u32 },
    #[error("corrupt file: {0}")]
    Corruption(String),
    #[error("model file holds the {found}, expected the {expected}")]
    ArchitectureKind {
        expected: &'static str,
        found: &'static str,
    },
    #[error("{0}")]
    Range(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Model(#[from] vae_core::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("download {url}: {message}")]
    Download { url: String, message: String },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) trait IoContext<T> {
    fn at(self, path: impl Into<PathBuf>) -> Result<T>;
}

impl<T> IoContext<T> for std::io::Result<T> {
    fn at(self, path: impl Into<PathBuf>) -> Result<T> {
        self.map_err(|source| Error::Io {
            path: path.into(),
            source,
        })
    }
}
