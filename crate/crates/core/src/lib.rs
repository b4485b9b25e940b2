//! Focus-on-local visual place recognition: SALAD-style aggregation,
//! discriminative region masks, training losses, pseudo-correspondence
//! labels, two-stage retrieval and recall evaluation.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod aggregation;
pub mod cli;
pub mod error;
pub mod eval;
pub mod losses;
pub mod model;
pub mod pipeline;
pub mod pseudocorr;
pub mod regions;
pub mod rerank;
pub mod retrieval;
pub mod store;
pub mod synth;
pub mod tensor;

pub use error::{FolError, Result};
pub use model::{
    AssignmentMatrix, AttentionStack, ClusterParams, DiscriminativeMask, FeatureMap, GlobalDescriptor,
    LocalFeatureMap, LossConfig, MaskKind,
};
pub use tensor::{read_tensor, write_tensor, Tensor};
