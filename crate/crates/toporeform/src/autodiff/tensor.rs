//! Dense tensors: a shape, a shared flat buffer of `f64`, and an optional
//! handle into the tape that produced them.

use std::sync::Arc;

use super::{AutodiffError, NodeId, Result};

/// A dense row-major tensor. Values are always held as 64-bit floats in
/// memory; the 32-bit weight-file payload is a storage concern only.
/// Buffers are reference-counted so recording a value on the tape and
/// handing it back to the caller shares one allocation; mutation copies
/// only when the buffer is actually shared.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Arc<Vec<f64>>,
    pub(crate) node: Option<NodeId>,
}

impl Tensor {
    /// Builds a detached tensor, validating that the buffer matches the shape.
    pub fn from_vec(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(AutodiffError::ShapeMismatch(format!(
                "shape {:?} holds {} elements but buffer has {}",
                shape,
                numel,
                data.len()
            )));
        }
        Ok(Tensor { shape, data: Arc::new(data), node: None })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Tensor { shape, data: Arc::new(vec![0.0; numel]), node: None }
    }

    pub fn filled(shape: Vec<usize>, value: f64) -> Self {
        let numel = shape.iter().product();
        Tensor { shape, data: Arc::new(vec![value; numel]), node: None }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor { shape: vec![1], data: Arc::new(vec![value]), node: None }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Mutable access to the buffer, copying first only if it is shared.
    /// Only detached tensors may be edited; a recorded value must stay
    /// equal to what the tape saw.
    pub fn data_mut(&mut self) -> &mut [f64] {
        debug_assert!(self.node.is_none(), "mutating a tensor recorded on a tape");
        Arc::make_mut(&mut self.data)
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// The single value of a scalar tensor.
    pub fn item(&self) -> f64 {
        debug_assert!(self.is_scalar());
        self.data[0]
    }

    /// A handle with no tape affiliation, sharing the same buffer.
    pub fn detached(&self) -> Tensor {
        Tensor { shape: self.shape.clone(), data: Arc::clone(&self.data), node: None }
    }

    pub(crate) fn with_node(&self, node: NodeId) -> Self {
        Tensor { shape: self.shape.clone(), data: Arc::clone(&self.data), node: Some(node) }
    }

    pub fn node_id(&self) -> Option<NodeId> {
        self.node
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Largest absolute elementwise difference to `other`.
    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        debug_assert_eq!(self.shape, other.shape);
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn from_vec_rejects_bad_length() {
        assert!(Tensor::from_vec(vec![2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::from_vec(vec![2, 3], vec![0.0; 6]).is_ok());
    }

    #[test]
    fn detached_drops_node() {
        let t = Tensor::scalar(1.0).with_node(3);
        assert_eq!(t.node_id(), Some(3));
        assert_eq!(t.detached().node_id(), None);
    }

    #[test]
    fn mutation_after_detach_does_not_alias() {
        let a = Tensor::scalar(1.0);
        let mut b = a.detached();
        b.data_mut()[0] = 9.0;
        assert_eq!(a.data(), &[1.0]);
        assert_eq!(b.data(), &[9.0]);
    }
}
