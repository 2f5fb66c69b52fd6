use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: expected {expected:?}, got {got:?}")]
    ShapeMismatch {
        expected: (usize, usize),
        got: (usize, usize),
    },
    #[error("invalid value: {0}")]
    InvalidValue(String),
    #[error("image is already linear; refusing to linearize twice")]
    AlreadyLinear,
    #[error("expected a {expected} image")]
    WrongEncoding { expected: &'static str },
    #[error("not a unit vector (norm {0})")]
    NotUnit(f64),
    #[error("invalid rotation: {0}")]
    InvalidRotation(String),
    #[error("empty mask: {0}")]
    EmptyMask(&'static str),
    #[error("degenerate input: {0}")]
    Degenerate(String),
    #[error("rank {achieved} is below the requested dimension {requested}")]
    RankDeficient { requested: usize, achieved: usize },
    #[error("non-finite energy in term `{term}` at iteration {iteration}")]
    NonFiniteEnergy { term: &'static str, iteration: usize },
    #[error("format error: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Image(#[from] image::ImageError),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Stable snake-case tag for machine-readable reports.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::ShapeMismatch { .. } => "shape_mismatch",
            Error::InvalidValue(_) => "invalid_value",
            Error::AlreadyLinear => "already_linear",
            Error::WrongEncoding { .. } => "wrong_encoding",
            Error::NotUnit(_) => "not_unit",
            Error::InvalidRotation(_) => "invalid_rotation",
            Error::EmptyMask(_) => "empty_mask",
            Error::Degenerate(_) => "degenerate",
            Error::RankDeficient { .. } => "rank_deficient",
            Error::NonFiniteEnergy { .. } => "non_finite_energy",
            Error::Format(_) => "format",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
            Error::Image(_) => "image",
        }
    }
}
