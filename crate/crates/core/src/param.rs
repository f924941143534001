//! Named parameters and buffers.

use std::collections::HashMap;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::tensor::{Float, Gradients, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

/// A named tensor. Trainable entries receive gradients; the rest are buffers
/// such as batch-norm running statistics.
#[derive(Clone, Debug)]
pub struct Parameter<T> {
    name: String,
    value: Arc<Tensor<T>>,
    grad: Option<Tensor<T>>,
    trainable: bool,
}

impl<T: Float> Parameter<T> {
    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn value(&self) -> &Tensor<T> {
        &self.value
    }

    pub(crate) fn value_arc(&self) -> Arc<Tensor<T>> {
        self.value.clone()
    }

    pub fn value_mut(&mut self) -> &mut Tensor<T> {
        Arc::make_mut(&mut self.value)
    }

    pub fn grad(&self) -> Option<&Tensor<T>> {
        self.grad.as_ref()
    }

    pub fn trainable(&self) -> bool {
        self.trainable
    }
}

#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    params: Vec<Parameter<T>>,
    by_name: HashMap<String, ParamId>,
}

impl<T: Float> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            params: Vec::new(),
            by_name: HashMap::new(),
        }
    }

    fn insert(&mut self, name: &str, value: Tensor<T>, trainable: bool) -> Result<ParamId> {
        if self.by_name.contains_key(name) {
            return Err(Error::InvalidArgument(format!(
                "duplicate parameter name `{name}`"
            )));
        }
        let id = ParamId(self.params.len());
        self.params.push(Parameter {
            name: name.to_string(),
            value: Arc::new(value),
            grad: None,
            trainable,
        });
        self.by_name.insert(name.to_string(), id);
        Ok(id)
    }

    pub fn add_param(&mut self, name: &str, value: Tensor<T>) -> Result<ParamId> {
        self.insert(name, value, true)
    }

    pub fn add_buffer(&mut self, name: &str, value: Tensor<T>) -> Result<ParamId> {
        self.insert(name, value, false)
    }

    pub fn get(&self, id: ParamId) -> &Parameter<T> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter<T> {
        &mut self.params[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn by_name(&self, name: &str) -> Option<&Parameter<T>> {
        self.id(name).map(|id| self.get(id))
    }

    pub fn value(&self, id: ParamId) -> &Tensor<T> {
        self.get(id).value()
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        self.get_mut(id).value_mut()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter<T>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn trainable_ids(&self) -> Vec<ParamId> {
        self.iter().filter(|(_, p)| p.trainable).map(|(id, _)| id).collect()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Number of trainable scalars whose name starts with `prefix`.
    pub fn count(&self, prefix: &str) -> usize {
        self.params
            .iter()
            .filter(|p| p.trainable && p.name.starts_with(prefix))
            .map(|p| p.value.len())
            .sum()
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad = None;
        }
    }

    /// Move tape gradients into the store. With `accumulate` the new gradient
    /// is added to whatever is already held; otherwise it replaces it.
    pub fn absorb_grads(&mut self, mut grads: Gradients<T>, accumulate: bool) {
        if !accumulate {
            self.zero_grads();
        }
        let ids: Vec<ParamId> = grads.param_ids().collect();
        for id in ids {
            let Some(g) = grads.take_param(id) else { continue };
            let p = &mut self.params[id.0];
            if !p.trainable {
                continue;
            }
            match &mut p.grad {
                Some(acc) => acc.add_assign(&g),
                slot => *slot = Some(g),
            }
        }
    }

    pub fn set_grad(&mut self, id: ParamId, grad: Tensor<T>) -> Result<()> {
        let p = &mut self.params[id.0];
        if grad.shape() != p.value.shape() {
            return Err(Error::shape(
                "set_grad",
                format!("{} is {:?}, grad is {:?}", p.name, p.value.shape(), grad.shape()),
            ));
        }
        p.grad = Some(grad);
        Ok(())
    }

    /// Copy every value from `other` by name. Shapes must agree.
    pub fn load_from(&mut self, other: &ParamStore<T>) -> Result<()> {
        for p in &mut self.params {
            let src = other.by_name(&p.name).ok_or_else(|| {
                Error::Checkpoint(format!("missing entry `{}`", p.name))
            })?;
            if src.value.shape() != p.value.shape() {
                return Err(Error::Checkpoint(format!(
                    "`{}` has shape {:?}, expected {:?}",
                    p.name,
                    src.value.shape(),
                    p.value.shape()
                )));
            }
            p.value = src.value.clone();
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_are_unique() {
        let mut s = ParamStore::<f32>::new();
        s.add_param("a.weight", Tensor::zeros([2])).unwrap();
        assert!(s.add_param("a.weight", Tensor::zeros([2])).is_err());
        assert!(s.add_buffer("a.weight", Tensor::zeros([2])).is_err());
    }

    #[test]
    fn count_skips_buffers() {
        let mut s = ParamStore::<f32>::new();
        s.add_param("dida.reduce.weight", Tensor::zeros([4, 8])).unwrap();
        s.add_param("fc.weight", Tensor::zeros([3])).unwrap();
        s.add_buffer("dida.stat", Tensor::zeros([100])).unwrap();
        assert_eq!(s.count("dida."), 32);
        assert_eq!(s.count(""), 35);
    }
}
