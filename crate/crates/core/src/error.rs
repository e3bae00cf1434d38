use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Dimension mismatch or an argument outside its documented domain.
    #[error("parameter error: {0}")]
    Param(String),

    /// NaN/inf input or a value that breaks a numeric precondition.
    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("invalid model: {0}")]
    InvalidModel(String),

    /// A statistic is undefined for the given data (e.g. zero variance).
    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    /// The caller violated a documented precondition.
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("optimization diverged: {0}")]
    Divergence(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("io error: {0}")]
    Io(#[from] io::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("image error: {0}")]
    Image(#[from] image::ImageError),
}

pub(crate) fn param_err(msg: impl Into<String>) -> Error {
    Error::Param(msg.into())
}

pub(crate) fn ensure_finite(label: &str, values: &[f64]) -> Result<()> {
    if let Some(pos) = values.iter().position(|v| !v.is_finite()) {
        return Err(Error::Numeric(format!("{label}[{pos}] is not finite")));
    }
    Ok(())
}

pub(crate) fn ensure_len(label: &str, values: &[f64], expected: usize) -> Result<()> {
    if values.len() != expected {
        return Err(param_err(format!(
            "{label} has length {}, expected {expected}",
            values.len()
        )));
    }
    Ok(())
}
