//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// A tensor axis does not have the size an operation requires.
    #[error("dimension mismatch on axis `{axis}`: expected {expected}, got {got}{}", fmt_ctx(.context))]
    Dim {
        axis: &'static str,
        expected: usize,
        got: usize,
        context: String,
    },

    /// An operation was configured with incompatible parameters
    /// (non-integral conv output size, odd pooling dims, downscale upsample, ...).
    #[error("invalid configuration: {0}")]
    Config(String),

    /// A mask with no foreground pixels where one is required.
    #[error("empty mask")]
    EmptyMask,

    /// Tape misuse: non-scalar loss, double backward, dangling ids.
    #[error("tape error: {0}")]
    Tape(String),

    /// Malformed on-disk data (checkpoint, PPM/PGM, dataset index).
    #[error("format error: {0}")]
    Format(String),

    /// Config-file parse failure, pointing at the key and line.
    #[error("config error at line {line}: key `{key}`: {msg}")]
    ConfigParse {
        line: usize,
        key: String,
        msg: String,
    },

    #[error("data error: {0}")]
    Data(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

fn fmt_ctx(ctx: &str) -> String {
    if ctx.is_empty() {
        String::new()
    } else {
        format!(" ({ctx})")
    }
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn dim(axis: &'static str, expected: usize, got: usize, context: impl Into<String>) -> Self {
        Error::Dim {
            axis,
            expected,
            got,
            context: context.into(),
        }
    }
}
