use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// An argument violates an operation's domain (non-finite, out of range, wrong shape).
    #[error("domain error: {0}")]
    Domain(String),

    /// Two histograms (or a histogram and a model) disagree on channel geometry.
    #[error("geometry mismatch: {0}")]
    Geometry(String),

    /// A text file does not follow its declared format.
    #[error("format error: {0}")]
    Format(String),

    /// Configuration file is missing a section/key or carries an unknown one.
    #[error("config error: {0}")]
    Config(String),

    /// A fit could not produce a usable result.
    #[error("fit error: {0}")]
    Fit(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub(crate) fn domain(msg: impl Into<String>) -> Error {
    Error::Domain(msg.into())
}

pub(crate) fn ensure_finite(name: &str, value: f64) -> Result<()> {
    if value.is_finite() {
        Ok(())
    } else {
        Err(domain(format!("{name} must be finite, got {value}")))
    }
}
