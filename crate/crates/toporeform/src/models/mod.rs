//! Network definitions and losses: the fixed classifier, the
//! topology-preserving autoencoder, and the reformer VAE with its
//! auxiliary projection, plus the named-tensor weight container.

mod classifier;
mod layers;
mod reformer;
mod topoae;
pub mod weights;

pub use classifier::{ClassifierConfig, ClassifierModel};
pub use layers::{Bound, Conv, Dense, Reg};
pub use reformer::{
    reformer_forward, reformer_loss, AuxModule, AuxPath, ReformerConfig, ReformerLoss, ReformerVae,
};
pub use topoae::{topoae_loss, TopoAeConfig, TopoAeLoss, TopoAeModel};

use crate::autodiff::Tensor;

pub type Result<T> = std::result::Result<T, ModelError>;

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error(transparent)]
    Autodiff(#[from] crate::autodiff::AutodiffError),
    #[error(transparent)]
    Topology(#[from] crate::topology::TopologyError),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("batch of {0} is too small; topological pairing needs at least 2 rows")]
    BatchTooSmall(usize),
    #[error(transparent)]
    Weights(#[from] weights::WeightsError),
    #[error("weight container is missing tensor {0}")]
    MissingTensor(String),
}

/// Copies container entries into a model's parameters by name, validating
/// shapes. Extra entries in the container are ignored so several models can
/// share one file.
pub(crate) fn load_into(
    names: Vec<String>,
    mut targets: Vec<&mut Tensor>,
    entries: &[(String, Tensor)],
) -> Result<()> {
    for (name, target) in names.iter().zip(targets.iter_mut()) {
        let source = entries
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| ModelError::MissingTensor(name.clone()))?;
        if source.shape() != target.shape() {
            return Err(ModelError::ShapeMismatch(format!(
                "{name}: container {:?} vs model {:?}",
                source.shape(),
                target.shape()
            )));
        }
        **target = source.detached();
    }
    Ok(())
}
