use std::path::PathBuf;

/// Errors raised anywhere in the detector stack.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{op}: shape mismatch on {dim}: expected {expected}, got {got}")]
    Shape {
        op: &'static str,
        dim: String,
        expected: String,
        got: String,
    },
    #[error("configuration error: {0}")]
    Config(String),
    #[error("partition error: {0}")]
    Partition(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("{op}: non-finite value at flat index {index}")]
    NonFinite { op: &'static str, index: usize },
    #[error("usage error: {0}")]
    Usage(String),
    #[error("build error at layer {layer}: {msg}")]
    Build { layer: usize, msg: String },
    #[error("weight file error{}: {msg}", fmt_layer(.layer))]
    Load { layer: Option<usize>, msg: String },
    #[error("parse error at byte {offset}: {msg}")]
    Parse { offset: usize, msg: String },
    #[error("preprocessing error: {0}")]
    Preprocess(String),
    #[error("benchmark error: {0}")]
    Bench(String),
    #[error("training aborted at iteration {iteration}: {msg}")]
    Training { iteration: usize, msg: String },
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("report format error: {0}")]
    Report(String),
}

fn fmt_layer(layer: &Option<usize>) -> String {
    match layer {
        Some(l) => format!(" at layer {l}"),
        None => String::new(),
    }
}

impl Error {
    pub(crate) fn shape(
        op: &'static str,
        dim: impl Into<String>,
        expected: impl ToString,
        got: impl ToString,
    ) -> Self {
        Error::Shape {
            op,
            dim: dim.into(),
            expected: expected.to_string(),
            got: got.to_string(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
