use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid grid: {0}")]
    InvalidGrid(String),

    #[error("grid mismatch: {0}")]
    GridMismatch(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("data not contained in the box: boundary-band energy fraction {fraction:.3e} exceeds {limit:.1e}")]
    Localization { fraction: f64, limit: f64 },

    #[error("unresolved: {0}")]
    Resolution(String),

    #[error("time {t} lies outside the validity window (t <= {t_max})")]
    OutsideWindow { t: f64, t_max: f64 },

    #[error("Picard iteration failed to contract after {iterations} iterations (last ratio {last_ratio:.3}); amplitude too large for the small-data regime")]
    SmallnessViolation {
        iterations: usize,
        last_ratio: f64,
        history: Vec<f64>,
    },

    #[error("insufficient horizon: tail bound {tail:.3e} exceeds {limit:.3e} at t_cut = {t_cut}")]
    InsufficientHorizon { tail: f64, limit: f64, t_cut: f64 },

    #[error("degenerate profile: |integral| = {integral:.3e} is below {threshold:.3e}")]
    DegenerateProfile { integral: f64, threshold: f64 },

    #[error("box too small: force support needs half-width {needed:.3} but the box allows {available:.3} (use L >= {needed_box_length:.1})")]
    BoxTooSmall {
        needed: f64,
        available: f64,
        needed_box_length: f64,
    },

    #[error("smallness conditions fail: {failing:?}; choose a larger radius or smaller data, or acknowledge the failure in the config")]
    SmallnessNotMet { failing: Vec<String> },

    #[error("synthesis diverged at outer iteration {iteration}: ratios {ratios:?}")]
    SynthesisDivergence { iteration: usize, ratios: Vec<f64> },

    #[error("missing calibration for dimension {0}")]
    MissingCalibration(usize),

    #[error("container format: {0}")]
    Format(String),

    #[error("config: {0}")]
    Config(String),

    #[error("missing artifact: {0}")]
    MissingArtifact(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
