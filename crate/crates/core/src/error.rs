use thiserror::Error;

pub type Result<T, E = UpaqError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum UpaqError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    /// Container is malformed: bad magic, unknown version, truncated blob.
    #[error("format error: {0}")]
    Format(String),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("validation failed{}: {msg}", layer_suffix(.layer))]
    Validation { layer: Option<String>, msg: String },

    #[error("invalid parameter: {0}")]
    Param(String),

    #[error("unsupported bitwidth {0} (expected 4, 8 or 16)")]
    UnsupportedBitwidth(u32),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("shape mismatch at layer '{layer}': {msg}")]
    Shape { layer: String, msg: String },

    #[error("input {index}: expected shape {expected:?}, got {got:?}")]
    InputShape {
        index: usize,
        expected: [usize; 3],
        got: [usize; 3],
    },

    #[error("profile '{profile}' incompatible with layer '{layer}': {msg}")]
    Profile {
        profile: String,
        layer: String,
        msg: String,
    },

    #[error("cost model error: {0}")]
    Cost(String),
}

fn layer_suffix(layer: &Option<String>) -> String {
    match layer {
        Some(id) => format!(" at layer '{id}'"),
        None => String::new(),
    }
}

impl UpaqError {
    pub(crate) fn validation(layer: impl Into<String>, msg: impl Into<String>) -> Self {
        UpaqError::Validation {
            layer: Some(layer.into()),
            msg: msg.into(),
        }
    }

    pub(crate) fn model(msg: impl Into<String>) -> Self {
        UpaqError::Validation {
            layer: None,
            msg: msg.into(),
        }
    }

    /// Process exit code used by the command line tool: 1 for IO and
    /// container problems, 2 for everything that is a validation failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            UpaqError::Io(_) | UpaqError::Format(_) | UpaqError::Json(_) => 1,
            _ => 2,
        }
    }
}
