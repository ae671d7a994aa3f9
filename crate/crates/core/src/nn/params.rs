use std::fmt;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Result};
use crate::tensor::{Scalar, Tensor};

/// Handle to one learnable tensor inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ParamId(pub usize);

impl fmt::Display for ParamId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "#{}", self.0)
    }
}

/// Ordered, named collection of every learnable tensor of a model.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore<S = f32> {
    names: Vec<String>,
    tensors: Vec<Tensor<S>>,
}

impl<S: Scalar> Default for ParamStore<S> {
    fn default() -> Self {
        Self {
            names: Vec::new(),
            tensors: Vec::new(),
        }
    }
}

impl<S: Scalar> ParamStore<S> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, tensor: Tensor<S>) -> ParamId {
        self.names.push(name.into());
        self.tensors.push(tensor);
        ParamId(self.tensors.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor<S> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<S> {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor<S>)> {
        self.names
            .iter()
            .zip(&self.tensors)
            .enumerate()
            .map(|(i, (n, t))| (ParamId(i), n.as_str(), t))
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    /// Total number of learnable scalars.
    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Replaces the tensor behind `id`, keeping its shape.
    pub fn set(&mut self, id: ParamId, tensor: Tensor<S>) -> Result<()> {
        if self.tensors[id.0].shape() != tensor.shape() {
            return Err(shape_err(format!(
                "parameter {} is {:?}, replacement is {:?}",
                self.names[id.0],
                self.tensors[id.0].shape(),
                tensor.shape()
            )));
        }
        self.tensors[id.0] = tensor;
        Ok(())
    }

    pub fn cast<T: Scalar>(&self) -> ParamStore<T> {
        ParamStore {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
        }
    }
}

/// A 2-D convolution's weight and bias handles.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvParams {
    pub weight: ParamId,
    pub bias: ParamId,
}

/// How a freshly created convolution is filled.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ConvInit {
    Zero,
    /// Weights and biases uniform in `±1/sqrt(fan_in)`.
    FanIn,
}

impl ConvParams {
    pub fn new<S: Scalar>(
        store: &mut ParamStore<S>,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        init: ConvInit,
        rng: &mut impl Rng,
    ) -> Self {
        let bound = match init {
            ConvInit::Zero => 0.0,
            ConvInit::FanIn => 1.0 / ((cin * kernel * kernel) as f64).sqrt(),
        };
        let weight = store.push(
            format!("{name}.weight"),
            Tensor::uniform(&[cout, cin, kernel, kernel], bound, rng),
        );
        let bias = store.push(format!("{name}.bias"), Tensor::uniform(&[cout], bound, rng));
        Self { weight, bias }
    }

    /// Element count of a `cin -> cout` convolution with bias.
    pub fn numel(cin: usize, cout: usize, kernel: usize) -> usize {
        cin * cout * kernel * kernel + cout
    }
}
