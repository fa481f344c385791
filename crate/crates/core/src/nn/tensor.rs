use std::sync::Arc;

use rand::Rng;

use super::real::Real;

/// Dense row-major tensor with shared, copy-on-write storage.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<F> {
    shape: Vec<usize>,
    data: Arc<Vec<F>>,
}

impl<F: Real> Tensor<F> {
    pub fn new(shape: Vec<usize>, data: Vec<F>) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "tensor shape {shape:?} does not match {} elements",
            data.len()
        );
        Tensor { shape, data: Arc::new(data) }
    }

    pub fn from_shared(shape: Vec<usize>, data: Arc<Vec<F>>) -> Self {
        assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor { shape, data }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let len = shape.iter().product();
        Tensor::new(shape, vec![F::zero(); len])
    }

    pub fn full(shape: Vec<usize>, value: F) -> Self {
        let len = shape.iter().product();
        Tensor::new(shape, vec![value; len])
    }

    pub fn scalar(value: F) -> Self {
        Tensor::new(vec![], vec![value])
    }

    pub fn from_f64(shape: Vec<usize>, data: &[f64]) -> Self {
        Tensor::new(shape, data.iter().map(|&x| F::c(x)).collect())
    }

    /// Uniform entries in `[-bound, bound)`.
    pub fn uniform<R: Rng + ?Sized>(shape: Vec<usize>, bound: f64, rng: &mut R) -> Self {
        let len = shape.iter().product();
        let data = (0..len).map(|_| F::c(rng.random_range(-bound..bound))).collect();
        Tensor::new(shape, data)
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

    pub fn data(&self) -> &[F] {
        &self.data
    }

    pub fn shared(&self) -> &Arc<Vec<F>> {
        &self.data
    }

    /// Mutable access; clones the storage if it is shared.
    pub fn data_mut(&mut self) -> &mut [F] {
        Arc::make_mut(&mut self.data).as_mut_slice()
    }

    pub fn reshape(&self, shape: Vec<usize>) -> Self {
        Tensor::from_shared(shape, self.data.clone())
    }

    pub fn item(&self) -> F {
        assert_eq!(self.data.len(), 1, "item() on a tensor with {} elements", self.data.len());
        self.data[0]
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data.iter().map(|x| x.f64()).collect()
    }

    pub fn cast<G: Real>(&self) -> Tensor<G> {
        Tensor::new(self.shape.clone(), self.data.iter().map(|x| G::c(x.f64())).collect())
    }

    pub fn sq_norm(&self) -> f64 {
        self.data.iter().map(|x| x.f64() * x.f64()).sum()
    }
}
