use serde::{Deserialize, Serialize};
use std::ops::Range;

use crate::error::{DbosError, Result};

/// One named tensor inside a [`ParamVector`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub offset: usize,
    pub shape: Vec<usize>,
}

impl ParamEntry {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> Range<usize> {
        self.offset..self.offset + self.len()
    }
}

/// Flat parameter storage with a registry of named, contiguous tensors.
///
/// Tensors are appended in registration order, so the total length is always
/// the sum of the registered shapes.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamVector {
    data: Vec<f64>,
    registry: Vec<ParamEntry>,
}

impl Default for ParamVector {
    fn default() -> Self {
        Self::new()
    }
}

impl ParamVector {
    pub fn new() -> Self {
        Self {
            data: Vec::new(),
            registry: Vec::new(),
        }
    }

    /// Appends a zero-filled tensor and returns its range.
    pub fn register(&mut self, name: impl Into<String>, shape: &[usize]) -> Result<Range<usize>> {
        let name = name.into();
        if self.registry.iter().any(|e| e.name == name) {
            return Err(DbosError::Config(format!("tensor `{name}` registered twice")));
        }
        let entry = ParamEntry {
            name,
            offset: self.data.len(),
            shape: shape.to_vec(),
        };
        let range = entry.range();
        self.data.resize(range.end, 0.0);
        self.registry.push(entry);
        Ok(range)
    }

    /// Rebuilds a vector from a registry and raw data, validating the layout.
    pub fn from_parts(registry: Vec<ParamEntry>, data: Vec<f64>) -> Result<Self> {
        let mut offset = 0;
        for e in &registry {
            if e.offset != offset {
                return Err(DbosError::Checkpoint(format!(
                    "tensor `{}` at offset {} but expected {}",
                    e.name, e.offset, offset
                )));
            }
            offset += e.len();
        }
        if offset != data.len() {
            return Err(DbosError::Dimension {
                context: "ParamVector::from_parts",
                expected: offset,
                got: data.len(),
            });
        }
        Ok(Self { data, registry })
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            data: vec![0.0; self.data.len()],
            registry: self.registry.clone(),
        }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn registry(&self) -> &[ParamEntry] {
        &self.registry
    }

    pub fn entry(&self, name: &str) -> Result<&ParamEntry> {
        self.registry
            .iter()
            .find(|e| e.name == name)
            .ok_or_else(|| DbosError::UnknownTensor(name.to_string()))
    }

    pub fn range(&self, name: &str) -> Result<Range<usize>> {
        Ok(self.entry(name)?.range())
    }

    pub fn get(&self, name: &str) -> Result<&[f64]> {
        let r = self.range(name)?;
        Ok(&self.data[r])
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut [f64]> {
        let r = self.range(name)?;
        Ok(&mut self.data[r])
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    /// Same registry, new data.
    pub fn with_data(&self, data: Vec<f64>) -> Result<Self> {
        Self::from_parts(self.registry.clone(), data)
    }

    pub fn fill(&mut self, v: f64) {
        self.data.iter_mut().for_each(|x| *x = v);
    }

    pub fn norm2(&self) -> f64 {
        super::l2_norm(&self.data)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn registry_covers_storage() {
        let mut p = ParamVector::new();
        let a = p.register("a", &[2, 3]).unwrap();
        let b = p.register("b", &[4]).unwrap();
        assert_eq!(a, 0..6);
        assert_eq!(b, 6..10);
        assert_eq!(p.len(), 10);
        let total: usize = p.registry().iter().map(|e| e.len()).sum();
        assert_eq!(total, p.len());
        p.get_mut("b").unwrap()[0] = 2.0;
        assert_eq!(p.as_slice()[6], 2.0);
    }

    #[test]
    fn duplicate_and_unknown_names() {
        let mut p = ParamVector::new();
        p.register("w", &[1]).unwrap();
        assert!(p.register("w", &[1]).is_err());
        assert!(matches!(p.get("nope"), Err(DbosError::UnknownTensor(_))));
    }

    #[test]
    fn from_parts_validates() {
        let mut p = ParamVector::new();
        p.register("w", &[3]).unwrap();
        assert!(ParamVector::from_parts(p.registry().to_vec(), vec![0.0; 2]).is_err());
        assert!(ParamVector::from_parts(p.registry().to_vec(), vec![0.0; 3]).is_ok());
    }
}
