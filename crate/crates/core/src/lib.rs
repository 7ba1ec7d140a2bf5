//! Paragraph-level speech synthesis building blocks at desk scale.
//!
//! The crate provides a small `f64` tensor engine with reverse-mode gradients, linearized
//! self-attention with permute-based relative position encoding, Conformer blocks with
//! segment-level memory, a text-based contextual encoder, and a seeded end-to-end
//! acoustic forward pass. All weights are synthetic.

pub mod attention;
pub mod autograd;
pub mod bench;
pub mod conformer;
pub mod context;
pub mod error;
pub mod memory;
pub mod pipeline;
pub mod tensor;

pub use attention::{AttentionConfig, AttentionVariant, Kernel, Permutation, RpeConfig};
pub use autograd::{GradTape, Gradients, Var};
pub use error::{Error, Result};
pub use memory::{MemoryConfig, SegmentMemory};
pub use tensor::{NamedTensors, Padding, Tensor};
