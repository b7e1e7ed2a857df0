use std::collections::BTreeMap;

use crate::diffcore::{Scalar, Tensor};
use crate::error::{bail, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct BufferId(pub usize);

/// A trainable tensor with a unique path name.
#[derive(Clone, Debug, PartialEq)]
pub struct Parameter<T> {
    pub name: String,
    pub tensor: Tensor<T>,
    /// Coefficient of the `l2 * ||w||^2` penalty; zero for biases and
    /// normalization scale/shift.
    pub l2_coefficient: f64,
}

/// A non-trainable tensor saved with the model (batch-norm running statistics).
#[derive(Clone, Debug, PartialEq)]
pub struct Buffer<T> {
    pub name: String,
    pub tensor: Tensor<T>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<T> {
    params: Vec<Parameter<T>>,
    buffers: Vec<Buffer<T>>,
    names: BTreeMap<String, ()>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            params: Vec::new(),
            buffers: Vec::new(),
            names: BTreeMap::new(),
        }
    }

    fn claim(&mut self, name: &str) -> Result<()> {
        if self.names.insert(name.to_string(), ()).is_some() {
            bail!(Config, "duplicate parameter name {name:?}");
        }
        Ok(())
    }

    pub fn add(&mut self, name: &str, tensor: Tensor<T>, l2_coefficient: f64) -> Result<ParamId> {
        if l2_coefficient < 0.0 {
            bail!(Config, "negative l2 coefficient for {name:?}");
        }
        self.claim(name)?;
        self.params.push(Parameter {
            name: name.to_string(),
            tensor,
            l2_coefficient,
        });
        Ok(ParamId(self.params.len() - 1))
    }

    pub fn add_buffer(&mut self, name: &str, tensor: Tensor<T>) -> Result<BufferId> {
        self.claim(name)?;
        self.buffers.push(Buffer {
            name: name.to_string(),
            tensor,
        });
        Ok(BufferId(self.buffers.len() - 1))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Parameter<T> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter<T> {
        &mut self.params[id.0]
    }

    pub fn buffer(&self, id: BufferId) -> &Buffer<T> {
        &self.buffers[id.0]
    }

    pub fn buffer_mut(&mut self, id: BufferId) -> &mut Buffer<T> {
        &mut self.buffers[id.0]
    }

    pub fn params(&self) -> &[Parameter<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Parameter<T>] {
        &mut self.params
    }

    pub fn buffers(&self) -> &[Buffer<T>] {
        &self.buffers
    }

    pub fn buffers_mut(&mut self) -> &mut [Buffer<T>] {
        &mut self.buffers
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    /// Total number of trainable scalars.
    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.tensor.len()).sum()
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Parameter {
                    name: p.name.clone(),
                    tensor: p.tensor.cast(),
                    l2_coefficient: p.l2_coefficient,
                })
                .collect(),
            buffers: self
                .buffers
                .iter()
                .map(|b| Buffer {
                    name: b.name.clone(),
                    tensor: b.tensor.cast(),
                })
                .collect(),
            names: self.names.clone(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_are_unique() {
        let mut s = ParamStore::<f32>::new();
        s.add("a.w", Tensor::zeros(&[2]), 0.1).unwrap();
        assert!(s.add("a.w", Tensor::zeros(&[2]), 0.1).is_err());
        assert!(s.add_buffer("a.w", Tensor::zeros(&[2])).is_err());
        assert!(s.add("b", Tensor::zeros(&[1]), -1.0).is_err());
    }
}
