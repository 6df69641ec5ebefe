use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("invalid configuration:\n  {}", .0.join("\n  "))]
    Config(Vec<String>),
    #[error(transparent)]
    Core(#[from] rte_core::Error),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("{0} acceptance check(s) failed")]
    Check(usize),
}

impl CliError {
    /// 2 for bad input, 3 for solver failures, 4 for failed checks.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Core(e) if e.is_solver_failure() => 3,
            CliError::Io(_) | CliError::Csv(_) | CliError::Json(_) => 3,
            CliError::Check(_) => 4,
            _ => 2,
        }
    }

    /// Machine-readable form written to stderr on failure.
    pub fn to_json(&self) -> serde_json::Value {
        let kind = match self {
            CliError::Config(_) => "config",
            CliError::Core(e) if e.is_solver_failure() => "solver",
            CliError::Core(_) => "input",
            CliError::Io(_) | CliError::Csv(_) | CliError::Json(_) => "output",
            CliError::Check(_) => "check",
        };
        let details = match self {
            CliError::Config(list) => list.clone(),
            other => vec![other.to_string()],
        };
        serde_json::json!({ "error": kind, "exit_code": self.exit_code(), "details": details })
    }
}
