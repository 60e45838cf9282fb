//! Named parameter collections with deterministic iteration order.

use std::collections::BTreeMap;

use super::Tensor;

/// Model parameters keyed by name. Backed by a `BTreeMap` so that iteration
/// (and therefore tape registration, optimizer updates, and checkpoint
/// layout) is always in name order, independent of insertion order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParameterSet {
    entries: BTreeMap<String, Tensor>,
}

impl ParameterSet {
    pub fn new() -> Self {
        Self::default()
    }

    /// Inserts a parameter. Names are unique by contract; a duplicate is a
    /// construction bug, so it panics rather than silently replacing.
    pub fn insert(&mut self, name: &str, tensor: Tensor) {
        let previous = self.entries.insert(name.to_string(), tensor);
        assert!(previous.is_none(), "duplicate parameter name {name:?}");
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.entries.get_mut(name)
    }

    /// Replaces an existing parameter's value, keeping its shape.
    pub fn set(&mut self, name: &str, tensor: Tensor) {
        match self.entries.get_mut(name) {
            Some(slot) => {
                assert_eq!(
                    slot.shape(),
                    tensor.shape(),
                    "shape change for parameter {name:?}"
                );
                *slot = tensor;
            }
            None => panic!("unknown parameter {name:?}"),
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.entries.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.entries.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.entries.keys()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of scalar elements across all parameters.
    pub fn total_elements(&self) -> usize {
        self.entries.values().map(Tensor::len).sum()
    }
}

impl FromIterator<(String, Tensor)> for ParameterSet {
    fn from_iter<I: IntoIterator<Item = (String, Tensor)>>(iter: I) -> Self {
        let mut set = Self::new();
        for (name, tensor) in iter {
            set.insert(&name, tensor);
        }
        set
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn iteration_is_name_ordered_regardless_of_insertion() {
        let mut p = ParameterSet::new();
        p.insert("zeta", Tensor::vector(vec![1.0]));
        p.insert("alpha", Tensor::vector(vec![2.0]));
        p.insert("mid", Tensor::vector(vec![3.0]));
        let names: Vec<&String> = p.names().collect();
        assert_eq!(names, ["alpha", "mid", "zeta"]);
    }

    #[test]
    #[should_panic(expected = "duplicate parameter")]
    fn duplicate_names_panic() {
        let mut p = ParameterSet::new();
        p.insert("w", Tensor::vector(vec![1.0]));
        p.insert("w", Tensor::vector(vec![2.0]));
    }

    #[test]
    fn total_elements_counts_scalars() {
        let mut p = ParameterSet::new();
        p.insert("a", Tensor::zeros(vec![2, 3]));
        p.insert("b", Tensor::zeros(vec![5]));
        assert_eq!(p.total_elements(), 11);
    }
}
