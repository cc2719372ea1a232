use std::path::PathBuf;

use mgll_core::annotations::AnnotationError;
use mgll_core::gradients::GradientError;
use mgll_core::losses::LossError;
use mgll_core::trainer::TrainerError;
use serde_json::json;
use thiserror::Error;

/// Exit status for a successful run.
pub const EXIT_OK: i32 = 0;
/// Exit status for errors raised while running a valid command.
pub const EXIT_DOMAIN: i32 = 1;
/// Exit status for malformed invocations and invalid configuration.
pub const EXIT_USAGE: i32 = 2;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Core(#[from] mgll_core::Error),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {message}")]
    Input { path: PathBuf, message: String },
    #[error("replayed results differ from the report: {0}")]
    ReplayMismatch(String),
}

macro_rules! core_error {
    ($($ty:ty),*) => {$(
        impl From<$ty> for CliError {
            fn from(e: $ty) -> Self {
                CliError::Core(e.into())
            }
        }
    )*};
}

core_error!(
    AnnotationError,
    LossError,
    GradientError,
    TrainerError,
    mgll_core::MetricsError,
    mgll_core::NumericsError
);

impl CliError {
    pub fn io(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> Self {
        let path = path.into();
        move |source| CliError::Io { path, source }
    }

    pub fn exit_code(&self) -> i32 {
        use mgll_core::Error as E;
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Core(e) => match e {
                E::Annotation(AnnotationError::InvalidSpec(_))
                | E::Loss(LossError::InvalidConfig(_))
                | E::Trainer(TrainerError::InvalidConfig(_))
                | E::Trainer(TrainerError::Loss(LossError::InvalidConfig(_)))
                | E::Gradient(GradientError::InvalidStep(_))
                | E::Gradient(GradientError::NoProbes) => EXIT_USAGE,
                _ => EXIT_DOMAIN,
            },
            CliError::Io { .. } | CliError::Input { .. } | CliError::ReplayMismatch(_) => {
                EXIT_DOMAIN
            }
        }
    }

    fn kind(&self) -> &'static str {
        use mgll_core::Error as E;
        match self {
            CliError::Usage(_) => "usage",
            CliError::Core(E::Numerics(_)) => "numerics",
            CliError::Core(E::Mgem(_)) => "mgem",
            CliError::Core(E::Annotation(_)) => "annotation",
            CliError::Core(E::Loss(_)) => "loss",
            CliError::Core(E::Gradient(_)) => "gradient",
            CliError::Core(E::Trainer(_)) => "trainer",
            CliError::Core(E::Metrics(_)) => "metrics",
            CliError::Io { .. } => "io",
            CliError::Input { .. } => "input",
            CliError::ReplayMismatch(_) => "replay",
        }
    }

    /// One-line JSON object for stderr.
    pub fn to_json(&self) -> String {
        json!({
            "error": self.kind(),
            "message": self.to_string(),
            "exit_code": self.exit_code(),
        })
        .to_string()
    }
}

pub type Result<T, E = CliError> = std::result::Result<T, E>;
