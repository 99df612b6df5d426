use serde_json::{json, Value};
use thiserror::Error;

/// Everything a run can fail with. `record` gives the machine-readable form
/// written to stderr.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("invalid config{}: {message}", key.as_ref().map(|k| format!(" at `{k}`")).unwrap_or_default())]
    Config { key: Option<String>, message: String },
    #[error("{path}: {message}")]
    Io { path: String, message: String },
    #[error("{path}: parse error on line {line}: {message}")]
    Parse { path: String, line: usize, message: String },
    #[error("{path}: uneven time spacing at rows {}", rows.iter().map(|r| r.to_string()).collect::<Vec<_>>().join(", "))]
    Spacing { path: String, rows: Vec<usize>, delta: f64 },
    #[error(transparent)]
    Core(#[from] subdiff::Error),
}

impl CliError {
    pub fn kind(&self) -> &'static str {
        match self {
            CliError::Config { .. } => "config",
            CliError::Io { .. } => "io",
            CliError::Parse { .. } => "parse",
            CliError::Spacing { .. } => "spacing",
            CliError::Core(e) => e.kind(),
        }
    }

    /// Process exit code: 2 for bad input, 1 for failures while running.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config { .. } | CliError::Io { .. } | CliError::Parse { .. } | CliError::Spacing { .. } => 2,
            CliError::Core(_) => 1,
        }
    }

    pub fn record(&self) -> Value {
        let mut rec = json!({
            "error": {
                "kind": self.kind(),
                "message": self.to_string(),
            }
        });
        let detail = match self {
            CliError::Config { key, .. } => json!({ "key": key }),
            CliError::Parse { path, line, .. } => json!({ "path": path, "line": line }),
            CliError::Spacing { path, rows, delta } => json!({ "path": path, "rows": rows, "delta": delta }),
            CliError::Io { path, .. } => json!({ "path": path }),
            CliError::Core(_) => Value::Null,
        };
        if !detail.is_null() {
            rec["error"]["detail"] = detail;
        }
        rec
    }
}
