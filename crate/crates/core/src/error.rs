use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Input failed structural or semantic validation.
    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("schema violation: {0}")]
    Schema(String),

    #[error("unknown device `{0}`")]
    UnknownDevice(String),

    #[error("no link rule resolves devices `{0}` and `{1}`")]
    UnresolvedLink(String, String),

    #[error("layout for task {task} is invalid: {reason}")]
    Layout { task: u8, reason: String },

    #[error("tasklet ({task},{replica},{stage},{shard}) is not assigned")]
    Unassigned {
        task: u8,
        replica: usize,
        stage: usize,
        shard: usize,
    },

    /// A cost component was requested for a task kind it does not apply to.
    #[error("{component} cost does not apply to task {task}")]
    Misuse { component: &'static str, task: u8 },

    #[error("search space of {size} plans exceeds the cap of {cap}")]
    SpaceTooLarge { size: f64, cap: f64 },

    #[error("no memory-feasible plan exists for this workflow and topology")]
    Infeasible,

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::Invalid(msg.into())
    }

    pub(crate) fn layout(task: u8, reason: impl Into<String>) -> Self {
        Error::Layout {
            task,
            reason: reason.into(),
        }
    }
}
