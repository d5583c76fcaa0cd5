use thiserror::Error;

/// Crate-wide error type. Variants map onto the failure classes the library
/// distinguishes at its boundaries; the CLI folds them into exit codes.
#[derive(Debug, Error)]
pub enum CtrlFlowError {
    /// Structural misuse: width mismatches, bad layer specs, invalid config.
    #[error("configuration error: {0}")]
    Config(String),

    /// A computation produced a non-finite value. `context` names the
    /// operation and, where meaningful, the layer or step index.
    #[error("numeric overflow in {context} (index {index:?})")]
    NumericOverflow {
        context: String,
        index: Option<usize>,
    },

    /// Environment stepped from a non-finite state.
    #[error("environment fault: {0}")]
    EnvFault(String),

    /// Retryable: the buffer does not yet hold enough data for the request.
    #[error("not ready: {0}")]
    NotReady(String),

    /// The Gramian is singular along `direction`; the system cannot be
    /// steered there.
    #[error("uncontrollable system: lambda_min = {lambda_min:.3e}, deficient direction {direction:?}")]
    Uncontrollable {
        lambda_min: f64,
        direction: Vec<f64>,
    },

    /// Training loss exceeded the divergence guard.
    #[error("training diverged: {0}")]
    TrainingDiverged(String),

    /// lambda_min stayed below the positive-definiteness floor for a full
    /// epoch of control training.
    #[error("control model degenerate: {0}")]
    ControlDegenerate(String),

    /// Input outside the operation's domain (e.g. empty trajectory).
    #[error("domain error: {0}")]
    Domain(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Serde(String),
}

impl From<serde_json::Error> for CtrlFlowError {
    fn from(e: serde_json::Error) -> Self {
        CtrlFlowError::Serde(e.to_string())
    }
}

impl From<toml::de::Error> for CtrlFlowError {
    fn from(e: toml::de::Error) -> Self {
        CtrlFlowError::Serde(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, CtrlFlowError>;

impl CtrlFlowError {
    pub fn config(msg: impl Into<String>) -> Self {
        CtrlFlowError::Config(msg.into())
    }

    pub fn overflow(context: impl Into<String>, index: Option<usize>) -> Self {
        CtrlFlowError::NumericOverflow {
            context: context.into(),
            index,
        }
    }

    pub fn domain(msg: impl Into<String>) -> Self {
        CtrlFlowError::Domain(msg.into())
    }
}
