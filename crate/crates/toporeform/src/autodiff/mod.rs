//! Minimal reverse-mode automatic differentiation over dense tensors.
//!
//! A hand-rolled Wengert tape carries every network, loss, and attack in
//! this crate: ops record themselves during the forward pass and a single
//! reverse sweep produces exact gradients. Keeping the engine in-tree makes
//! surrogate substitutions (identity backward passes, spliced external
//! losses) explicit operations rather than framework tricks, and all
//! accumulation runs in 64-bit.

mod adam;
mod gradcheck;
mod kernels;
mod tape;
mod tensor;

pub use adam::{adam_step, AdamParams, AdamState};
pub use gradcheck::{check_all_ops, default_shapes, finite_diff_check, ALL_OPS};
pub use tape::{Attrs, Gradients, OpKind, Padding, Tape};
pub use tensor::Tensor;

pub type NodeId = usize;

pub type Result<T> = std::result::Result<T, AutodiffError>;

#[derive(Debug, thiserror::Error)]
pub enum AutodiffError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("unsupported op: {0}")]
    UnsupportedOp(String),
    #[error("non-finite value encountered")]
    NonFinite,
    #[error("loss must be scalar, got {0} elements")]
    NotScalarLoss(usize),
    #[error("tensor does not belong to this tape")]
    DanglingNode,
    #[error("could not sample a point away from a kink")]
    KinkUnavoidable,
}
