use crate::error::{Error, Result};
use rand::Rng;
use rand_distr::StandardNormal;

/// Dense n-dimensional value, row-major, with a gradient slot of the same
/// extent. This is the persistent form (parameters, frozen embeddings);
/// differentiable computation happens on [`crate::graph::Graph`] nodes.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    grad: Vec<f64>,
}

pub fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Tensor {
        let n = numel(shape);
        Tensor { shape: shape.to_vec(), data: vec![0.0; n], grad: vec![0.0; n] }
    }

    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Result<Tensor> {
        if numel(shape) != data.len() {
            return Err(Error::Dimension(format!(
                "shape {:?} holds {} elements, got {}",
                shape,
                numel(shape),
                data.len()
            )));
        }
        let n = data.len();
        Ok(Tensor { shape: shape.to_vec(), data, grad: vec![0.0; n] })
    }

    /// Gaussian init with the given standard deviation.
    pub fn randn<R: Rng>(shape: &[usize], std: f64, rng: &mut R) -> Tensor {
        let n = numel(shape);
        let data = (0..n).map(|_| rng.sample::<f64, _>(StandardNormal) * std).collect();
        Tensor { shape: shape.to_vec(), data, grad: vec![0.0; n] }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn grad(&self) -> &[f64] {
        &self.grad
    }

    pub fn grad_mut(&mut self) -> &mut [f64] {
        &mut self.grad
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(0.0);
    }

    /// Overwrite the gradient slot (used to pull gradients out of a graph).
    pub fn set_grad(&mut self, grad: &[f64]) {
        debug_assert_eq!(grad.len(), self.grad.len());
        self.grad.copy_from_slice(grad);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_data_grad_lengths_agree() {
        let t = Tensor::zeros(&[2, 3, 4]);
        assert_eq!(t.len(), 24);
        assert_eq!(t.data().len(), t.grad().len());
        assert_eq!(numel(t.shape()), t.len());
    }

    #[test]
    fn from_vec_rejects_mismatch() {
        assert!(Tensor::from_vec(&[2, 2], vec![1.0; 3]).is_err());
    }

    #[test]
    fn scalar_shape_is_one_element() {
        let t = Tensor::zeros(&[]);
        assert_eq!(t.len(), 1);
    }

    #[test]
    fn fresh_tensor_has_zero_grad() {
        let t = Tensor::from_vec(&[2], vec![1.0, -1.0]).unwrap();
        assert_eq!(t.grad(), &[0.0, 0.0]);
    }
}
