//! Coarse-to-fine temporal grounding over precomputed embeddings.

pub mod adapter;
pub mod bench;
pub mod datastore;
pub mod error;
pub mod eval;
pub mod kv;
pub mod optim;
pub mod pipeline;
pub mod ranking;
pub mod scorer;
pub mod selection;
pub mod span;
pub mod vector;
pub mod windowing;

pub use error::{Error, Result};
pub use span::{iou, Span};
