//! Control engine for rare-concept text-to-image sampling.
//!
//! The engine decides, step by step, which prompt a diffusion sampler should
//! condition on. A language model splits a prompt into rare concepts and
//! frequent stand-ins ([`llm`], [`concept`]). Cross-attention scores
//! ([`scoring`]) tell the [`scheduler`] when each stand-in has done its job.
//! [`embedding`] holds the pooled-embedding and latent-space vector operations.
//! [`mock`] runs whole sessions against synthetic attention so the control
//! logic can be exercised without a model, producing [`trace`] files.

pub mod bridge;
pub mod compare;
pub mod concept;
pub mod embedding;
pub mod json;
pub mod llm;
pub mod mock;
pub mod scheduler;
pub mod scoring;
pub mod tensor_file;
pub mod trace;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Concept(#[from] concept::ConceptError),
    #[error(transparent)]
    Embedding(#[from] embedding::EmbeddingError),
    #[error(transparent)]
    Llm(#[from] llm::LlmError),
    #[error(transparent)]
    Mock(#[from] mock::MockError),
    #[error(transparent)]
    Scheduler(#[from] scheduler::SchedulerError),
    #[error(transparent)]
    Scoring(#[from] scoring::ScoringError),
    #[error(transparent)]
    TensorFile(#[from] tensor_file::TensorFileError),
    #[error(transparent)]
    Trace(#[from] trace::TraceError),
    #[error(transparent)]
    Compare(#[from] compare::CompareError),
    #[error("{0}")]
    Config(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn code(&self) -> &'static str {
        match self {
            Self::Concept(e) => e.code(),
            Self::Embedding(e) => e.code(),
            Self::Llm(e) => e.code(),
            Self::Mock(e) => e.code(),
            Self::Scheduler(e) => e.code(),
            Self::Scoring(e) => e.code(),
            Self::TensorFile(e) => e.code(),
            Self::Trace(e) => e.code(),
            Self::Compare(e) => e.code(),
            Self::Config(_) => "InvalidConfig",
            Self::Io(_) => "Io",
        }
    }

    /// Process exit status: 3 when the language-model service could not be
    /// reached, 1 for local I/O failures, 2 for everything the caller can fix.
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Llm(llm::LlmError::BackendUnavailable(_) | llm::LlmError::BackendStatus { .. }) => 3,
            Self::Io(_) => 1,
            Self::TensorFile(tensor_file::TensorFileError::Io { .. }) => 1,
            _ => 2,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
