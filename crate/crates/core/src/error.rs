use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("parameter error: {0}")]
    Parameter(String),

    #[error("state error: {0}")]
    State(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("registry error: {0}")]
    Registry(String),

    #[error("metric error: {0}")]
    Metric(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("loss error: {0}")]
    Loss(String),

    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Process exit code for the CLI: 2 usage/config, 3 data, 4 numeric.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Parameter(_) => 2,
            Error::Data(_) | Error::Io(_) | Error::Format(_) => 3,
            Error::Numeric(_)
            | Error::Loss(_)
            | Error::Dimension(_)
            | Error::State(_)
            | Error::Registry(_)
            | Error::Metric(_) => 4,
        }
    }
}
