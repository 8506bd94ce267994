use std::path::PathBuf;

/// Errors surfaced by the library.
#[derive(thiserror::Error, Debug)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// Binary container violated its format; `field` names the offending part.
    #[error("{container} format error in field `{field}`: {detail}")]
    Format {
        container: &'static str,
        field: &'static str,
        detail: String,
    },

    #[error("config error: {0}")]
    Config(String),

    #[error("config key `{key}` out of range: {detail}")]
    Range { key: &'static str, detail: String },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("view position ({elev}, {azim}) out of range for {e}x{a} grid")]
    IndexOutOfRange {
        elev: usize,
        azim: usize,
        e: usize,
        a: usize,
    },

    #[error("missing prerequisite artifact: run the `{stage}` stage first ({detail})")]
    MissingStage { stage: &'static str, detail: String },

    #[error("refusing to overwrite existing output {0} (pass --overwrite)")]
    WouldOverwrite(PathBuf),

    #[error("non-finite loss encountered: {0}")]
    NonFinite(String),

    #[error("checkpoint checksum mismatch (corrupt file?)")]
    Checksum,

    #[error("{0}")]
    Invalid(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
