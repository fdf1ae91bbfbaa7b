use serde_json::{json, Value};
use thiserror::Error;
use vpflow::VpError;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("invalid config at '{pointer}': {message}")]
    Config { pointer: String, message: String },

    #[error("{context}: {source}")]
    Numerical {
        context: String,
        #[source]
        source: VpError,
    },

    #[error("cannot write {path}: {message}")]
    Output { path: String, message: String },
}

impl CliError {
    pub fn numerical(context: String) -> impl FnOnce(VpError) -> CliError {
        move |source| CliError::Numerical { context, source }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Config { .. } => 2,
            Self::Numerical { .. } | Self::Output { .. } => 3,
        }
    }

    /// Machine-readable form printed on failure.
    pub fn to_json(&self) -> Value {
        let mut v = json!({
            "status": "error",
            "exit_code": self.exit_code(),
            "message": self.to_string(),
        });
        match self {
            Self::Config { pointer, .. } => {
                v["kind"] = json!("config");
                v["pointer"] = json!(pointer);
            }
            Self::Numerical { context, source } => {
                v["kind"] = json!("numerical");
                v["context"] = json!(context);
                v["detail"] = json!(source.to_string());
            }
            Self::Output { path, .. } => {
                v["kind"] = json!("output");
                v["path"] = json!(path);
            }
        }
        v
    }
}
