use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed header: {0}")]
    MalformedHeader(String),

    #[error("truncated payload: tensor `{name}` ends at byte {end} but the payload holds {available} bytes")]
    TruncatedPayload { name: String, end: u64, available: u64 },

    #[error("unsupported dtype `{dtype}` for tensor `{name}`")]
    UnsupportedDtype { name: String, dtype: String },

    #[error("duplicate tensor name `{0}`")]
    DuplicateTensor(String),

    #[error("no tensors")]
    NoTensors,

    #[error("empty tensor `{0}`")]
    EmptyTensor(String),

    #[error("shape {shape:?} implies {expected} elements but the buffer holds {actual}")]
    ShapeMismatch {
        shape: Vec<usize>,
        expected: usize,
        actual: usize,
    },

    #[error("keyspace mismatch: {0}")]
    Keyspace(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("evaluator exited with {status}; stderr: {stderr}")]
    EvaluatorExit { status: String, stderr: String },

    #[error("evaluator timed out after {seconds} s")]
    EvaluatorTimeout { seconds: f64 },

    #[error("incomplete scores: missing {}", missing.join(", "))]
    IncompleteScores { missing: Vec<String> },

    #[error("unexpected scores for unknown tasks: {}", extra.join(", "))]
    UnexpectedScores { extra: Vec<String> },

    #[error("malformed evaluator output: {0}")]
    MalformedScores(String),

    #[error("evaluation of particle {particle} at step {step} failed: {source}")]
    ParticleEvaluation {
        particle: usize,
        step: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("evaluation of candidate {candidate} in generation {generation} failed: {source}")]
    CandidateEvaluation {
        candidate: usize,
        generation: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("non-finite value in particle {particle}, tensor `{tensor}`, element {element} at step {step}")]
    NonFinite {
        particle: usize,
        step: usize,
        tensor: String,
        element: usize,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
