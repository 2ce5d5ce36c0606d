use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::tensor::io::StoredTensor;
use crate::tensor::{Scalar, Tensor};

/// Ordered, uniquely named weight tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSet<T> {
    entries: Vec<(String, Tensor<T>)>,
    index: HashMap<String, usize>,
}

impl<T: Scalar> Default for ParamSet<T> {
    fn default() -> Self {
        ParamSet {
            entries: Vec::new(),
            index: HashMap::new(),
        }
    }
}

impl<T: Scalar> ParamSet<T> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor<T>) -> Result<()> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::WeightMismatch {
                name,
                reason: "is defined twice".into(),
            });
        }
        self.index.insert(name.clone(), self.entries.len());
        self.entries.push((name, t));
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.index.get(name).map(|&i| &self.entries[i].1)
    }

    pub(crate) fn expect(&self, name: &str) -> Result<&Tensor<T>> {
        self.get(name).ok_or_else(|| Error::WeightMismatch {
            name: name.to_owned(),
            reason: "is missing".into(),
        })
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.index.get(name).map(|&i| &mut self.entries[i].1)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<T>)> {
        self.entries.iter_mut().map(|(n, t)| (n.as_str(), t))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn element_count(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.len()).sum()
    }

    pub fn to_stored(&self) -> Vec<(String, StoredTensor)>
    where
        StoredTensor: From<Tensor<T>>,
    {
        self.entries
            .iter()
            .map(|(n, t)| (n.clone(), StoredTensor::from(t.clone())))
            .collect()
    }
}

/// Running statistics are part of the weights but not trained.
pub fn is_statistic(name: &str) -> bool {
    name.ends_with("/bn/mean") || name.ends_with("/bn/var")
}
