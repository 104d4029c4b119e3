//! Maps errors to process exit codes.

use std::fmt;

use promptsearch_core::backend::BackendError;
use promptsearch_core::dataset::DatasetError;
use promptsearch_core::mutation::MutationError;
use promptsearch_core::prompt::TemplateFileError;
use promptsearch_core::registry::{DataError, RegistryError};
use promptsearch_core::soft_prompt::SoftPromptError;

use crate::config::ConfigError;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExitKind {
    Usage = 1,
    Backend = 2,
    Data = 3,
}

impl ExitKind {
    pub fn code(self) -> i32 {
        self as i32
    }
}

#[derive(Debug)]
pub struct Failure {
    pub kind: ExitKind,
    pub error: anyhow::Error,
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:#}", self.error)
    }
}

/// Backend trouble anywhere in the chain wins, then data problems; anything
/// else is a usage or configuration error.
pub fn classify(error: &anyhow::Error) -> ExitKind {
    let chain = || error.chain();
    if chain().any(|e| e.is::<BackendError>() || e.is::<MutationError>()) {
        return ExitKind::Backend;
    }
    if chain().any(|e| matches!(e.downcast_ref::<RegistryError>(), Some(RegistryError::UnknownTask(_)))) {
        return ExitKind::Usage;
    }
    let data = chain().any(|e| {
        e.is::<RegistryError>()
            || e.is::<DataError>()
            || e.is::<TemplateFileError>()
            || e.is::<DatasetError>()
            || e.is::<SoftPromptError>()
            || e.is::<DataFileError>()
    });
    if data {
        return ExitKind::Data;
    }
    if chain().any(|e| e.is::<ConfigError>()) {
        return ExitKind::Usage;
    }
    ExitKind::Usage
}

impl From<anyhow::Error> for Failure {
    fn from(error: anyhow::Error) -> Self {
        Self {
            kind: classify(&error),
            error,
        }
    }
}

/// Problems with an input file read by the command line itself.
#[derive(Debug, thiserror::Error)]
#[error("{path}: {message}")]
pub struct DataFileError {
    pub path: String,
    pub message: String,
}
