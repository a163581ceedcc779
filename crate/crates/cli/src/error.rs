use std::fmt;
use std::process::ExitCode;

use subtask_diag_core::data::DataError;
use subtask_diag_core::knowledge::KnowledgeError;
use subtask_diag_core::oracle::EvalError;
use subtask_diag_core::prompt::PromptError;
use subtask_diag_core::report::ReportError;
use subtask_diag_core::sim::SimError;
use subtask_diag_gateway::GatewayError;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExitKind {
    Usage = 1,
    Data = 2,
    Backend = 3,
}

#[derive(Debug)]
pub struct CliError {
    pub kind: ExitKind,
    pub message: String,
}

impl CliError {
    pub fn usage(message: impl Into<String>) -> Self {
        Self { kind: ExitKind::Usage, message: message.into() }
    }

    pub fn data(message: impl Into<String>) -> Self {
        Self { kind: ExitKind::Data, message: message.into() }
    }

    pub fn backend(message: impl Into<String>) -> Self {
        Self { kind: ExitKind::Backend, message: message.into() }
    }

    pub fn exit_code(&self) -> ExitCode {
        ExitCode::from(self.kind as u8)
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        CliError::data(e.to_string())
    }
}

impl From<PromptError> for CliError {
    fn from(e: PromptError) -> Self {
        match e {
            PromptError::EmptyInput(_) | PromptError::InvalidForSetting { .. } => CliError::data(e.to_string()),
            _ => CliError::usage(e.to_string()),
        }
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        match e {
            EvalError::InvalidConfig(_) => CliError::usage(e.to_string()),
            EvalError::AllSeedsFailed { .. } => CliError::backend(e.to_string()),
            EvalError::Prompt(p) => p.into(),
            _ => CliError::data(e.to_string()),
        }
    }
}

impl From<KnowledgeError> for CliError {
    fn from(e: KnowledgeError) -> Self {
        match e {
            KnowledgeError::NothingScorable { .. } | KnowledgeError::ScoringUnsupported(_) => {
                CliError::backend(e.to_string())
            }
            KnowledgeError::Prompt(p) => p.into(),
            _ => CliError::data(e.to_string()),
        }
    }
}

impl From<ReportError> for CliError {
    fn from(e: ReportError) -> Self {
        match e {
            ReportError::UnknownFormat(_) => CliError::usage(e.to_string()),
            _ => CliError::data(e.to_string()),
        }
    }
}

impl From<SimError> for CliError {
    fn from(e: SimError) -> Self {
        CliError::usage(e.to_string())
    }
}

impl From<GatewayError> for CliError {
    fn from(e: GatewayError) -> Self {
        match e {
            GatewayError::InvalidRequest(_) => CliError::usage(e.to_string()),
            _ => CliError::backend(e.to_string()),
        }
    }
}
