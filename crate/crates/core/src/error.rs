use std::io;

use thiserror::Error;

/// Errors produced anywhere in the segmentation pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),
    #[error("argument error: {0}")]
    Argument(String),
    #[error("geometry error: {0}")]
    Geometry(String),
    #[error("completeness error: {0}")]
    Completeness(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("optimizer state error: {0}")]
    State(String),
    #[error("no valid pixels")]
    NoValidPixels,
    #[error("format error: {0}")]
    Format(String),
    #[error("io error: {0}")]
    Io(#[from] io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

macro_rules! dim_err {
    ($($arg:tt)*) => { $crate::error::Error::Dimension(format!($($arg)*)) };
}
macro_rules! arg_err {
    ($($arg:tt)*) => { $crate::error::Error::Argument(format!($($arg)*)) };
}
pub(crate) use arg_err;
pub(crate) use dim_err;
