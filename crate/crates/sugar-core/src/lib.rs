//! Skeleton-based action recognition at desk scale: a graph-convolutional
//! skeleton encoder pretrained against per-action motion/visual text
//! embeddings with a multi-positive contrastive objective, a chained
//! query-transformer bridge that distills full-length representations into
//! fixed-length action tokens, and a small LoRA-adapted decoder LM that
//! classifies against a predefined action list and emits a brief description.

pub mod archive;
pub mod contrastive;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod knowledge;
pub mod manifest;
pub mod nn;
pub mod pipeline;
pub mod recognizer;
pub mod skeleton;
pub mod toy;
pub mod tqp;

pub use error::{Result, SugarError};
pub use toy::{toy_action_specs, TOY_CLASSES, TOY_CONFUSABLE_PAIRS};
