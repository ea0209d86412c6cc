use serde::{Deserialize, Serialize};

use crate::scalar::Scalar;

/// Handle to one tensor inside a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ParamId(pub(crate) usize);

#[derive(Debug, Clone, PartialEq)]
pub struct ParamTensor<T> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<T>,
}

/// Named flat tensors. Used for trainable parameters, their gradients,
/// optimizer moments and batch-norm running statistics.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore<T> {
    tensors: Vec<ParamTensor<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self { tensors: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, shape: Vec<usize>, data: Vec<T>) -> ParamId {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.tensors.push(ParamTensor {
            name: name.into(),
            shape,
            data,
        });
        ParamId(self.tensors.len() - 1)
    }

    /// Same names and shapes, all zeros.
    pub fn zeros_like(&self) -> Self {
        Self {
            tensors: self
                .tensors
                .iter()
                .map(|t| ParamTensor {
                    name: t.name.clone(),
                    shape: t.shape.clone(),
                    data: vec![T::zero(); t.data.len()],
                })
                .collect(),
        }
    }

    #[inline]
    pub fn get(&self, id: ParamId) -> &[T] {
        &self.tensors[id.0].data
    }

    #[inline]
    pub fn get_mut(&mut self, id: ParamId) -> &mut [T] {
        &mut self.tensors[id.0].data
    }

    pub fn tensors(&self) -> &[ParamTensor<T>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [ParamTensor<T>] {
        &mut self.tensors
    }

    pub fn find(&self, name: &str) -> Option<&ParamTensor<T>> {
        self.tensors.iter().find(|t| t.name == name)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total number of scalars.
    pub fn numel(&self) -> usize {
        self.tensors.iter().map(|t| t.data.len()).sum()
    }

    /// Scalar at flat position `index` across all tensors, in order.
    pub fn flat_get(&self, index: usize) -> T {
        let (t, i) = self.locate(index);
        self.tensors[t].data[i]
    }

    pub fn flat_set(&mut self, index: usize, value: T) {
        let (t, i) = self.locate(index);
        self.tensors[t].data[i] = value;
    }

    /// Tensor name owning flat position `index`.
    pub fn flat_name(&self, index: usize) -> &str {
        &self.tensors[self.locate(index).0].name
    }

    fn locate(&self, mut index: usize) -> (usize, usize) {
        for (t, tensor) in self.tensors.iter().enumerate() {
            if index < tensor.data.len() {
                return (t, index);
            }
            index -= tensor.data.len();
        }
        panic!("flat parameter index out of range");
    }

    pub fn fill_zero(&mut self) {
        for t in &mut self.tensors {
            t.data.iter_mut().for_each(|v| *v = T::zero());
        }
    }

    /// Same layout as `other` (names and shapes).
    pub fn same_layout(&self, other: &Self) -> bool {
        self.tensors.len() == other.tensors.len()
            && self
                .tensors
                .iter()
                .zip(&other.tensors)
                .all(|(a, b)| a.name == b.name && a.shape == b.shape)
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(|t| t.data.iter().all(|v| v.is_finite()))
    }

    pub fn sum_squares(&self) -> T {
        self.tensors
            .iter()
            .flat_map(|t| t.data.iter())
            .fold(T::zero(), |acc, &v| acc + v * v)
    }
}

/// Gradients share the parameter layout.
pub type Grads<T> = ParamStore<T>;
