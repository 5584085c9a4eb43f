use std::fmt;

use rescore_core::Error as CoreError;

/// Failure classes, each with its own exit status.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Kind {
    Usage,
    Config,
    Io,
    Data,
    Model,
}

impl Kind {
    pub fn exit_code(self) -> i32 {
        match self {
            Kind::Usage => 2,
            Kind::Config => 3,
            Kind::Io => 4,
            Kind::Data => 5,
            Kind::Model => 6,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Kind::Usage => "usage",
            Kind::Config => "config",
            Kind::Io => "io",
            Kind::Data => "data",
            Kind::Model => "model",
        }
    }
}

#[derive(Debug)]
pub struct CliError {
    pub kind: Kind,
    pub msg: String,
}

impl CliError {
    pub fn new(kind: Kind, msg: impl Into<String>) -> Self {
        Self { kind, msg: msg.into() }
    }

    pub fn usage(msg: impl Into<String>) -> Self {
        Self::new(Kind::Usage, msg)
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Self::new(Kind::Config, msg)
    }

    pub fn model(msg: impl Into<String>) -> Self {
        Self::new(Kind::Model, msg)
    }

    /// The single line written to stderr: `error kind=<kind> code=<n> msg="<json-escaped>"`.
    pub fn line(&self) -> String {
        let msg = serde_json::to_string(&self.msg).unwrap_or_else(|_| "\"?\"".into());
        format!("error kind={} code={} msg={msg}", self.kind.name(), self.kind.exit_code())
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.kind.name(), self.msg)
    }
}

impl std::error::Error for CliError {}

impl From<CoreError> for CliError {
    fn from(e: CoreError) -> Self {
        let kind = match &e {
            CoreError::InvalidConfig(_) | CoreError::InvalidTrainingConfig(_) => Kind::Config,
            CoreError::Io { .. } => Kind::Io,
            CoreError::ShapeMismatch { .. }
            | CoreError::NonScalarLoss(_)
            | CoreError::NonFinite { .. }
            | CoreError::NotMasked(_) => Kind::Model,
            CoreError::SequenceTooLong { .. }
            | CoreError::TokenOutOfRange { .. }
            | CoreError::InvalidInput(_)
            | CoreError::EmptyCorpus
            | CoreError::NotAnnotated(_)
            | CoreError::MissingPll { .. }
            | CoreError::Malformed { .. }
            | CoreError::Json(_) => Kind::Data,
        };
        Self::new(kind, e.to_string())
    }
}

pub type CliResult<T> = Result<T, CliError>;
