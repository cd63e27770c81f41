use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("input error: {0}")]
    Input(String),

    #[error("unknown token {token:?}")]
    Vocabulary { token: String },

    #[error("index {index} out of range (limit {limit}) in {what}")]
    Index {
        what: &'static str,
        index: usize,
        limit: usize,
    },

    #[error("stack overflow: pointer mass {mass} would be pushed past the top row")]
    StackOverflow { mass: f64 },

    #[error("stack underflow: pop with all pointer mass at the bottom row")]
    StackUnderflow,

    #[error("layout error: {0}")]
    Layout(String),

    #[error("template not applicable: {0}")]
    Retry(String),

    #[error("generation error: {0}")]
    Generation(String),

    #[error("non-finite gradient in parameter {param}")]
    NonFiniteGradient { param: String },

    #[error("non-finite loss on example {example_id}; parameter norms: {norms}")]
    NonFiniteLoss { example_id: u64, norms: String },

    #[error("parse error at line {line}: {detail}")]
    Parse { line: usize, detail: String },

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }
}
