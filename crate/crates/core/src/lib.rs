//! Relation-aware pretraining for conversation trees: label derivation from
//! reply structure, a compact transformer encoder trained with masked-token
//! and pairwise relation objectives, and downstream claim classification.

pub mod config;
pub mod conversation;
pub mod encoder;
pub mod eval;
pub mod error;
pub mod labels;
pub mod objectives;
pub mod synthetic;
pub mod text;
pub mod trainer;

pub use conversation::{ClaimConversation, ConversationDataset, Post};
pub use error::{ConversationError, Error, Result};
pub use labels::{derive_all, LabelMatrices, RelationMatrix, Task};
