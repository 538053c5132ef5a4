use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::tape::{Tape, Var};
use super::{AutodiffError, Tensor};

/// Ordered collection of named parameter tensors.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamSet {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

#[derive(Serialize, Deserialize)]
struct StoredTensor {
    shape: Vec<usize>,
    values: Vec<f64>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) {
        let name = name.into();
        assert!(!self.names.contains(&name), "duplicate parameter {name}");
        self.names.push(name);
        self.tensors.push(tensor);
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.names.iter().position(|n| n == name).map(|i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(move |i| &mut self.tensors[i])
    }

    pub fn total_len(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Records every parameter as a leaf on `tape`.
    pub fn register<'a>(&'a self, tape: &mut Tape, requires_grad: bool) -> BoundParams<'a> {
        let vars = self
            .tensors
            .iter()
            .map(|t| tape.leaf(t.clone(), requires_grad))
            .collect();
        BoundParams {
            names: &self.names,
            vars,
        }
    }

    /// Binds already-recorded vars, one per parameter in insertion order.
    pub fn bind(&self, vars: Vec<Var>) -> BoundParams<'_> {
        assert_eq!(vars.len(), self.tensors.len(), "one var per parameter");
        BoundParams {
            names: &self.names,
            vars,
        }
    }

    /// `{name: {shape, values}}` JSON; floats use shortest round-trip formatting.
    pub fn to_json(&self) -> serde_json::Value {
        let map: BTreeMap<&str, StoredTensor> = self
            .names
            .iter()
            .zip(&self.tensors)
            .map(|(n, t)| {
                (
                    n.as_str(),
                    StoredTensor {
                        shape: t.shape().to_vec(),
                        values: t.values().to_vec(),
                    },
                )
            })
            .collect();
        serde_json::to_value(map).expect("parameter map serializes")
    }

    /// Overwrites values from a JSON checkpoint; every name and shape must match.
    pub fn load_json(&mut self, value: &serde_json::Value) -> Result<(), AutodiffError> {
        let mut map: BTreeMap<String, StoredTensor> = serde_json::from_value(value.clone())
            .map_err(|e| AutodiffError::Checkpoint(e.to_string()))?;
        for (name, tensor) in self.names.iter().zip(&mut self.tensors) {
            let stored = map
                .remove(name)
                .ok_or_else(|| AutodiffError::Checkpoint(format!("missing parameter {name}")))?;
            if stored.shape != tensor.shape() {
                return Err(AutodiffError::Checkpoint(format!(
                    "parameter {name}: shape {:?}, expected {:?}",
                    stored.shape,
                    tensor.shape()
                )));
            }
            *tensor = Tensor::new(stored.shape, stored.values)?;
        }
        if let Some(extra) = map.keys().next() {
            return Err(AutodiffError::Checkpoint(format!("unexpected parameter {extra}")));
        }
        Ok(())
    }
}

/// Parameters of a [`ParamSet`] recorded on one tape.
#[derive(Debug, Clone)]
pub struct BoundParams<'a> {
    names: &'a [String],
    vars: Vec<Var>,
}

impl BoundParams<'_> {
    /// Panics on unknown names: parameter layouts are fixed by each model.
    pub fn var(&self, name: &str) -> Var {
        let i = self
            .names
            .iter()
            .position(|n| n == name)
            .unwrap_or_else(|| panic!("no parameter named {name}"));
        self.vars[i]
    }

    pub fn contains(&self, name: &str) -> bool {
        self.names.iter().any(|n| n == name)
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}
