use std::collections::HashMap;

use ndarray::Array2;
use rand::Rng;

use crate::{NnError, Result, Scalar};

/// Index of a tensor inside its [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A named trainable matrix and its gradient accumulator.
#[derive(Clone, Debug)]
pub struct ParamTensor<T> {
    pub name: String,
    pub value: Array2<T>,
    pub grad: Array2<T>,
}

impl<T: Scalar> ParamTensor<T> {
    pub fn shape(&self) -> [usize; 2] {
        let (r, c) = self.value.dim();
        [r, c]
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }
}

/// Ordered collection of every trainable tensor of a model.
///
/// Insertion order is stable and defines the checkpoint layout.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    tensors: Vec<ParamTensor<T>>,
    index: HashMap<String, ParamId>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            tensors: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Array2<T>) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(NnError::DuplicateParam(name));
        }
        let id = ParamId(self.tensors.len());
        let grad = Array2::zeros(value.raw_dim());
        self.index.insert(name.clone(), id);
        self.tensors.push(ParamTensor { name, value, grad });
        Ok(id)
    }

    /// Adds a `rows x cols` tensor drawn uniformly from `[-bound, bound]`.
    pub fn add_uniform<R: Rng>(
        &mut self,
        name: impl Into<String>,
        rows: usize,
        cols: usize,
        bound: f64,
        rng: &mut R,
    ) -> Result<ParamId> {
        let value = Array2::from_shape_simple_fn((rows, cols), || {
            T::from_f64(rng.random_range(-bound..=bound))
        });
        self.add(name, value)
    }

    pub fn get(&self, id: ParamId) -> &ParamTensor<T> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut ParamTensor<T> {
        &mut self.tensors[id.0]
    }

    pub fn id(&self, name: &str) -> Result<ParamId> {
        self.index
            .get(name)
            .copied()
            .ok_or_else(|| NnError::UnknownParam(name.to_string()))
    }

    pub fn by_name(&self, name: &str) -> Result<&ParamTensor<T>> {
        Ok(self.get(self.id(name)?))
    }

    pub fn by_name_mut(&mut self, name: &str) -> Result<&mut ParamTensor<T>> {
        let id = self.id(name)?;
        Ok(self.get_mut(id))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &ParamTensor<T>> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut ParamTensor<T>> {
        self.tensors.iter_mut()
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(|t| t.value.len()).sum()
    }

    pub fn zero_grad(&mut self) {
        for t in &mut self.tensors {
            t.grad.fill(T::zero());
        }
    }

    /// Converts every tensor to another scalar type (gradients are reset).
    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        let mut out = ParamStore::new();
        for t in &self.tensors {
            out.add(t.name.clone(), t.value.mapv(|x| U::from_f64(x.to_f64())))
                .expect("names are unique in the source store");
        }
        out
    }
}
