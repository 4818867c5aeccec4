use std::fmt;

use crate::dsl::VarId;

/// Crate-wide error type.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("provider error: {0}")]
    Provider(String),

    #[error("could not parse provider reply: {0}")]
    Parse(String),

    #[error("syntax error at byte {offset}: expected {}, found {found}", Expected(.expected))]
    Syntax {
        offset: usize,
        expected: Vec<&'static str>,
        found: String,
    },

    #[error("reference to undefined variable {0}")]
    DanglingVarRef(VarId),

    #[error("type mismatch: {0}")]
    TypeMismatch(String),

    #[error("unknown intent `{0}`")]
    UnknownIntent(String),

    #[error("unknown variable {0}")]
    UnknownVariable(VarId),

    #[error("invalid transition: {0}")]
    InvalidTransition(String),

    #[error("span violation: `{value}` does not occur in the user utterance")]
    SpanViolation { value: String },

    #[error("phenomenon token {expected} missing from user reply")]
    MissingToken { expected: String },

    #[error("prediction alignment: {0}")]
    Alignment(String),

    #[error("malformed record at line {line}: {detail}")]
    Schema { line: usize, detail: String },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

struct Expected<'a>(&'a [&'static str]);

impl fmt::Display for Expected<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.0 {
            [] => f.write_str("nothing"),
            [one] => f.write_str(one),
            many => write!(f, "one of {}", many.join(", ")),
        }
    }
}

impl Error {
    pub(crate) fn parse(msg: impl Into<String>) -> Self {
        Error::Parse(msg.into())
    }

    pub(crate) fn precondition(msg: impl Into<String>) -> Self {
        Error::Precondition(msg.into())
    }

    /// Short machine-friendly identifier, used in verdict logs and abort reasons.
    pub fn code(&self) -> &'static str {
        match self {
            Error::Precondition(_) => "precondition",
            Error::Provider(_) => "provider_error",
            Error::Parse(_) => "parse_error",
            Error::Syntax { .. } => "syntax_error",
            Error::DanglingVarRef(_) => "dangling_var_ref",
            Error::TypeMismatch(_) => "type_mismatch",
            Error::UnknownIntent(_) => "unknown_intent",
            Error::UnknownVariable(_) => "unknown_variable",
            Error::InvalidTransition(_) => "invalid_transition",
            Error::SpanViolation { .. } => "span_violation",
            Error::MissingToken { .. } => "missing_token",
            Error::Alignment(_) => "alignment_error",
            Error::Schema { .. } => "schema_error",
            Error::Config(_) => "config_error",
            Error::Io(_) => "io_error",
        }
    }
}
