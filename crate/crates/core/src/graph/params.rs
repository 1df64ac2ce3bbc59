use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Role of a named tensor, derived from the last path segment.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    /// Convolution or linear weights; the only kind that receives weight decay.
    Weight,
    Bias,
    /// Batch-norm `gamma` / `beta`.
    Norm,
    /// Batch-norm running statistics; saved but never trained.
    Buffer,
}

impl ParamKind {
    pub fn of(name: &str) -> ParamKind {
        match name.rsplit('.').next().unwrap_or(name) {
            "weight" => ParamKind::Weight,
            "bias" => ParamKind::Bias,
            "gamma" | "beta" => ParamKind::Norm,
            _ => ParamKind::Buffer,
        }
    }

    pub fn is_trainable(self) -> bool {
        self != ParamKind::Buffer
    }
}

/// Named tensors keyed by parameter path, e.g. `stage1.plain.conv0.weight`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Parameters<T> {
    tensors: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> Parameters<T> {
    pub fn new() -> Self {
        Parameters {
            tensors: BTreeMap::new(),
        }
    }

    /// Fails on a duplicate name.
    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor<T>) -> Result<()> {
        let name = name.into();
        if self.tensors.contains_key(&name) {
            return Err(Error::config(format!("duplicate parameter name {name}")));
        }
        self.tensors.insert(name, tensor);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.tensors.get_mut(name)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<T>)> {
        self.tensors.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    /// Total number of trainable scalars.
    pub fn trainable_count(&self) -> usize {
        self.iter()
            .filter(|(n, _)| ParamKind::of(n).is_trainable())
            .map(|(_, t)| t.len())
            .sum()
    }
}

impl<T> FromIterator<(String, Tensor<T>)> for Parameters<T> {
    fn from_iter<I: IntoIterator<Item = (String, Tensor<T>)>>(iter: I) -> Self {
        Parameters {
            tensors: iter.into_iter().collect(),
        }
    }
}

/// Anything holding named parameter tensors.
pub trait ParameterSet<T> {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor<T>));
    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor<T>));
}

impl<T: Scalar> ParameterSet<T> for Parameters<T> {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor<T>)) {
        for (k, v) in &self.tensors {
            f(k, v);
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        for (k, v) in self.tensors.iter_mut() {
            f(k, v);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kinds_follow_suffix() {
        assert_eq!(ParamKind::of("stage1.plain.conv0.weight"), ParamKind::Weight);
        assert_eq!(ParamKind::of("head.bias"), ParamKind::Bias);
        assert_eq!(ParamKind::of("fusion2.bn.gamma"), ParamKind::Norm);
        assert_eq!(ParamKind::of("fusion2.bn.running_var"), ParamKind::Buffer);
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut p = Parameters::<f32>::new();
        p.insert("a.weight", Tensor::zeros([1, 1, 1, 1])).unwrap();
        assert!(p.insert("a.weight", Tensor::zeros([1, 1, 1, 1])).is_err());
    }
}
