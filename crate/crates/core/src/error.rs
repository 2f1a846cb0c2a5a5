use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("maximum angular spread {0} rad must be below pi/2")]
    SpreadTooWide(f64),

    #[error("no signal in observation window (peak-to-mean ratio {ratio:.3})")]
    NoSignal { ratio: f64 },

    #[error("cholesky factorisation failed after jitter")]
    Cholesky,

    #[error("innovation covariance singular at block {block}")]
    SingularInnovation { block: usize },

    #[error("predicted covariance singular at block {block}")]
    SingularPrediction { block: usize },

    #[error("degenerate geometry: tracked DOAs of users {0} and {1} coincide")]
    DegenerateGeometry(usize, usize),

    #[error("pilot design infeasible: {t} pilots do not fit in {n} slots")]
    PilotInfeasible { t: usize, n: usize },

    #[error("pilot design violation: {0}")]
    PilotDesign(String),

    #[error("rank-deficient least-squares system")]
    RankDeficient,

    #[error("user {user} cannot be placed within {max} groups")]
    GroupOverflow { user: usize, max: usize },

    #[error("zero-norm reference channel")]
    ZeroNorm,

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("config parse error: {0}")]
    Parse(String),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    /// True for errors caused by bad user input rather than numerical trouble.
    pub fn is_config(&self) -> bool {
        matches!(
            self,
            Error::Config(_)
                | Error::Parse(_)
                | Error::SpreadTooWide(_)
                | Error::PilotInfeasible { .. }
                | Error::GroupOverflow { .. }
        )
    }
}

impl From<toml::de::Error> for Error {
    fn from(e: toml::de::Error) -> Self {
        Error::Parse(e.to_string())
    }
}

impl From<toml::ser::Error> for Error {
    fn from(e: toml::ser::Error) -> Self {
        Error::Parse(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
