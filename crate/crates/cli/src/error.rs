use std::fmt;
use std::path::Path;

use divgen_core::assembler::AssembleError;
use divgen_core::backend::{BackendError, RunError};
use divgen_core::harness::HarnessError;
use divgen_core::prompt::{PlanFileError, PromptError};
use divgen_core::report::ReportError;
use divgen_core::sampler::SamplerError;

/// Process exit status classes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Exit {
    Usage = 1,
    Validation = 2,
    Backend = 3,
    Integrity = 4,
}

/// Printed to stderr as `ERROR <code>: <message>` on one line.
#[derive(Debug)]
pub struct CliError {
    pub code: &'static str,
    pub exit: Exit,
    pub message: String,
}

impl CliError {
    pub fn new(code: &'static str, exit: Exit, message: impl Into<String>) -> Self {
        Self {
            code,
            exit,
            message: message.into(),
        }
    }

    pub fn config(message: String) -> Self {
        Self::new("ConfigInvalid", Exit::Validation, message)
    }

    pub fn usage(message: impl Into<String>) -> Self {
        Self::new("Usage", Exit::Usage, message)
    }

    pub fn io(path: &Path, e: std::io::Error) -> Self {
        Self::new("Io", Exit::Validation, format!("{}: {e}", path.display()))
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        // Keep the line machine-parsable.
        let flat = self.message.replace(['\n', '\r'], " ");
        write!(f, "ERROR {}: {}", self.code, flat)
    }
}

impl From<BackendError> for CliError {
    fn from(e: BackendError) -> Self {
        let code = match e {
            BackendError::BackendUnreachable { .. } => "BackendUnreachable",
            BackendError::BackendRejectedRequest { .. } => "BackendRejectedRequest",
            BackendError::TimeoutExceeded { .. } => "TimeoutExceeded",
            BackendError::PixelShapeMismatch { .. } => "PixelShapeMismatch",
            BackendError::UndecodableImage(_) => "UndecodableImage",
            BackendError::InvalidDescriptor(_) => return Self::config(e.to_string()),
        };
        Self::new(code, Exit::Backend, e.to_string())
    }
}

impl From<RunError> for CliError {
    fn from(e: RunError) -> Self {
        match e {
            RunError::PlanAborted { .. } => Self::new("PlanAborted", Exit::Backend, e.to_string()),
            RunError::Checkpoint { .. } => Self::new("Checkpoint", Exit::Validation, e.to_string()),
            RunError::Sink { .. } => Self::new("StagingFailed", Exit::Validation, e.to_string()),
        }
    }
}

impl From<AssembleError> for CliError {
    fn from(e: AssembleError) -> Self {
        let (code, exit) = match e {
            AssembleError::MissingRecords { .. } => ("MissingRecords", Exit::Integrity),
            AssembleError::DuplicateRecord(_) => ("DuplicateRecord", Exit::Integrity),
            AssembleError::CountMismatch { .. } => ("CountMismatch", Exit::Integrity),
            AssembleError::PlanTaskMismatch { .. } => ("PlanTaskMismatch", Exit::Validation),
            AssembleError::UnsafeClassLabel(_) => ("UnsafeClassLabel", Exit::Validation),
            AssembleError::Rescale { .. } => ("RescaleFailed", Exit::Validation),
            AssembleError::Load { .. } => ("RecordUnreadable", Exit::Integrity),
            AssembleError::Io { .. } => ("Io", Exit::Validation),
        };
        Self::new(code, exit, e.to_string())
    }
}

impl From<HarnessError> for CliError {
    fn from(e: HarnessError) -> Self {
        let (code, exit) = match e {
            HarnessError::ManifestInvalid { .. } => ("ManifestInvalid", Exit::Integrity),
            HarnessError::UnknownArchitecture(_) => ("UnknownArchitecture", Exit::Validation),
            HarnessError::GeometryMismatch { .. } => ("GeometryMismatch", Exit::Validation),
            HarnessError::TestSetUnreadable { .. } => ("TestSetUnreadable", Exit::Validation),
            HarnessError::ClassCountMismatch { .. } => ("ClassCountMismatch", Exit::Validation),
            HarnessError::FeatureHookUnavailable => ("FeatureHookUnavailable", Exit::Validation),
            HarnessError::Artifact { .. } => ("ArtifactInvalid", Exit::Validation),
            HarnessError::Tensor(_) => ("TensorBackend", Exit::Validation),
            HarnessError::Io { .. } => ("Io", Exit::Validation),
        };
        Self::new(code, exit, e.to_string())
    }
}

impl From<ReportError> for CliError {
    fn from(e: ReportError) -> Self {
        let code = match e {
            ReportError::MissingBaseline { .. } => "MissingBaseline",
            ReportError::ReferenceImmutable { .. } => "ReferenceImmutable",
            ReportError::Malformed(_) => "LedgerMalformed",
            ReportError::Io { .. } => "Io",
        };
        Self::new(code, Exit::Validation, e.to_string())
    }
}

impl From<PromptError> for CliError {
    fn from(e: PromptError) -> Self {
        Self::new("PlanInvalid", Exit::Validation, e.to_string())
    }
}

impl From<PlanFileError> for CliError {
    fn from(e: PlanFileError) -> Self {
        let code = match e {
            PlanFileError::Io { .. } => "Io",
            PlanFileError::Malformed { .. } => "PlanMalformed",
        };
        Self::new(code, Exit::Validation, e.to_string())
    }
}

impl From<SamplerError> for CliError {
    fn from(e: SamplerError) -> Self {
        Self::new("SamplerInvalid", Exit::Validation, e.to_string())
    }
}
