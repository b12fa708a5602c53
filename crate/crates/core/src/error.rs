use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Bad argument or violated precondition.
    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("rect {index} ({w} x {h} nm) is too small for pixel size {pixel_size} nm (need pixel_size <= {limit} nm)")]
    PixelTooCoarse {
        index: usize,
        w: f64,
        h: f64,
        pixel_size: f64,
        limit: f64,
    },

    #[error("grid mismatch: {0}")]
    GridMismatch(String),

    #[error("grid is not binary (value {value} at index {index})")]
    NotBinary { index: usize, value: f64 },

    #[error("only one class present in training data ({0})")]
    SingleClass(&'static str),

    #[error("{what} did not converge after {iterations} iterations (residual {residual:e})")]
    NotConverged {
        what: &'static str,
        iterations: usize,
        residual: f64,
    },

    #[error("ambiguous process window: {} crossings at {crossings:?}", crossings.len())]
    AmbiguousWindow { crossings: Vec<f64> },

    #[error("eta is unidentifiable: all onset points share rho = {0}")]
    Unidentifiable(f64),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::Invalid(msg.into())
    }
}
