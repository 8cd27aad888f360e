use std::path::PathBuf;

use thiserror::Error;

/// Why a claim record was rejected.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ConversationError {
    #[error("record {id}: malformed record: {reason}")]
    Malformed { id: String, reason: String },
    #[error("record {id}: conversation has no posts")]
    NoPosts { id: String },
    #[error("record {id}: post {post} has empty text")]
    EmptyText { id: String, post: usize },
    #[error("record {id}: post {post} points at parent {parent}, which does not exist")]
    DanglingParent { id: String, post: usize, parent: i64 },
    #[error("record {id}: missing root (every post has a parent)")]
    MissingRoot { id: String },
    #[error("record {id}: multiple roots at posts {roots:?}")]
    MultipleRoots { id: String, roots: Vec<usize> },
    #[error("record {id}: cycle through post {post}")]
    Cycle { id: String, post: usize },
}

impl ConversationError {
    pub fn record_id(&self) -> &str {
        match self {
            Self::Malformed { id, .. }
            | Self::NoPosts { id }
            | Self::EmptyText { id, .. }
            | Self::DanglingParent { id, .. }
            | Self::MissingRoot { id }
            | Self::MultipleRoots { id, .. }
            | Self::Cycle { id, .. } => id,
        }
    }
}

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Conversation(#[from] ConversationError),
    #[error("{path}:{line}: {reason}")]
    Input { path: PathBuf, line: usize, reason: String },
    #[error("empty input: {0}")]
    EmptyInput(&'static str),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("non-finite loss at step {step} of stage {stage}")]
    NonFiniteLoss { stage: u8, step: usize },
    #[error("checkpoint version {found} is not supported (expected {expected})")]
    CheckpointVersion { found: u32, expected: u32 },
    #[error("checkpoint checksum mismatch{}", block.as_ref().map(|b| format!(" in block `{b}`")).unwrap_or_default())]
    CheckpointChecksum { block: Option<String> },
    #[error("corrupt checkpoint: {0}")]
    CheckpointFormat(String),
    #[error("classifier needs at least two classes, found {0}")]
    SingleClass(usize),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
