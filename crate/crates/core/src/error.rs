use thiserror::Error;

/// Errors raised by the laboratory. Variants follow the failure classes the
/// library distinguishes: bad caller input, numeric blow-ups, malformed files,
/// invalid diffusion schedules, defenses that reject every update, and
/// configuration problems.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    Input(String),

    #[error("non-finite value in layer {layer}: {detail}")]
    Numeric { layer: usize, detail: String },

    #[error("training diverged at epoch {epoch}, step {step}: loss = {loss}")]
    Diverged { epoch: usize, step: usize, loss: f64 },

    #[error("malformed {field}: {detail}")]
    Format { field: String, detail: String },

    #[error("invalid schedule: {0}")]
    Schedule(String),

    #[error("defense rejected all updates: {0}")]
    Defense(String),

    #[error("config error at `{key}`: {message}")]
    Config { key: String, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn input<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Input(msg.into()))
}
