//! Named parameter storage shared by the network, optimizer, and checkpoints.

use ndarray::Array2;
use sha2::{Digest, Sha256};
use std::collections::HashMap;

/// An ordered collection of named f64 matrices.
///
/// Order is fixed at construction and defines the checkpoint block layout,
/// the optimizer state layout, and gradient indexing.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Array2<f64>>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore {
            names: Vec::new(),
            values: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn add(&mut self, name: &str, value: Array2<f64>) -> usize {
        assert!(
            !self.index.contains_key(name),
            "duplicate parameter name {name}"
        );
        let idx = self.values.len();
        self.names.push(name.to_string());
        self.values.push(value);
        self.index.insert(name.to_string(), idx);
        idx
    }

    /// Index of a parameter; the name must exist.
    pub fn id(&self, name: &str) -> usize {
        *self
            .index
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn name(&self, idx: usize) -> &str {
        &self.names[idx]
    }

    pub fn value(&self, idx: usize) -> &Array2<f64> {
        &self.values[idx]
    }

    pub fn value_mut(&mut self, idx: usize) -> &mut Array2<f64> {
        &mut self.values[idx]
    }

    pub fn by_name(&self, name: &str) -> &Array2<f64> {
        &self.values[self.id(name)]
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Array2<f64>)> {
        self.names.iter().map(|n| n.as_str()).zip(self.values.iter())
    }

    /// Total scalar parameter count.
    pub fn total_len(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.values
            .iter()
            .all(|v| v.iter().all(|x| x.is_finite()))
    }

    /// Content hash of every parameter bit pattern, in manifest order.
    pub fn checksum(&self) -> String {
        let mut hasher = Sha256::new();
        for (name, value) in self.iter() {
            hasher.update(name.as_bytes());
            for v in value.iter() {
                hasher.update(v.to_le_bytes());
            }
        }
        hasher
            .finalize()
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }
}

impl Default for ParamStore {
    fn default() -> Self {
        Self::new()
    }
}
