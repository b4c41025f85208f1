use thiserror::Error;

/// Errors raised by the training engine.
#[derive(Debug, Error)]
pub enum Error {
    /// Incompatible shapes or hyperparameters for an operation or model.
    #[error("configuration error: {0}")]
    Config(String),

    /// Malformed input data (bad file, out-of-range label, ...).
    #[error("data error: {0}")]
    Data(String),

    /// A binary file did not match its expected layout.
    #[error("format error at byte offset {offset}: {message}")]
    Format { offset: usize, message: String },

    /// Misuse of the autograd tape.
    #[error("usage error: {0}")]
    Usage(String),

    /// Train-mode batch normalization over a single value per channel.
    #[error("degenerate batch: batchnorm needs at least 2 values per channel, got {0}")]
    DegenerateBatch(usize),

    /// A loss or gradient became NaN or infinite.
    #[error("training diverged at step {step}{}: {what}", swd_coefficient.map(|a| format!(" (a = {a:e})")).unwrap_or_default())]
    Divergence {
        step: usize,
        what: String,
        swd_coefficient: Option<f64>,
    },

    /// A structured removal would leave some layer without any channel.
    #[error("structural collapse: {0} would lose every channel")]
    StructuralCollapse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn config_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Config(msg.into()))
}
