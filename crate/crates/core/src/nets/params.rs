use std::collections::BTreeMap;

use sha2::{Digest, Sha256};

use super::tensor::Tensor;
use crate::error::{FanError, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub value: Tensor,
    pub trainable: bool,
}

/// Named parameter tensors for every instantiated network.
///
/// Names are `<model>.<layer>.<w|b>`; shapes are fixed once inserted.
/// `version` counts optimizer steps applied to the store.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: BTreeMap<String, Param>,
    pub version: u64,
}

impl ParamStore {
    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> Result<()> {
        let name = name.into();
        if self.params.contains_key(&name) {
            return Err(FanError::validation(format!("duplicate parameter {name}")));
        }
        self.params.insert(
            name,
            Param {
                value,
                trainable: true,
            },
        );
        Ok(())
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn get(&self, name: &str) -> Result<&Param> {
        self.params
            .get(name)
            .ok_or_else(|| FanError::Lookup(format!("no parameter named {name}")))
    }

    /// Panics on unknown names; networks check their parameters up front.
    pub fn value(&self, name: &str) -> &Tensor {
        match self.params.get(name) {
            Some(p) => &p.value,
            None => panic!("parameter {name} missing from store"),
        }
    }

    /// Replaces a parameter's values; the shape must not change.
    pub fn set(&mut self, name: &str, value: Tensor) -> Result<()> {
        let p = self
            .params
            .get_mut(name)
            .ok_or_else(|| FanError::Lookup(format!("no parameter named {name}")))?;
        if p.value.shape() != value.shape() {
            return Err(FanError::validation(format!(
                "shape of {name} is immutable: {:?} vs {:?}",
                p.value.shape(),
                value.shape()
            )));
        }
        p.value = value;
        Ok(())
    }

    pub(crate) fn param_mut(&mut self, name: &str) -> Option<&mut Param> {
        self.params.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Param)> {
        self.params.iter()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn names_with_prefix<'a>(&'a self, prefix: &'a str) -> impl Iterator<Item = &'a String> + 'a {
        self.params
            .keys()
            .filter(move |k| k.starts_with(prefix) && k[prefix.len()..].starts_with('.'))
    }

    pub fn has_prefix(&self, prefix: &str) -> bool {
        self.names_with_prefix(prefix).next().is_some()
    }

    fn resolve(&self, names: &[&str]) -> Result<Vec<String>> {
        let mut out = Vec::new();
        for &n in names {
            if self.params.contains_key(n) {
                out.push(n.to_string());
            } else {
                let matched: Vec<String> = self.names_with_prefix(n).cloned().collect();
                if matched.is_empty() {
                    return Err(FanError::Lookup(format!("no parameter or model named {n}")));
                }
                out.extend(matched);
            }
        }
        Ok(out)
    }

    /// Marks parameters (or whole models, by prefix) as frozen.
    pub fn freeze(&mut self, names: &[&str]) -> Result<()> {
        self.set_trainable(names, false)
    }

    pub fn unfreeze(&mut self, names: &[&str]) -> Result<()> {
        self.set_trainable(names, true)
    }

    fn set_trainable(&mut self, names: &[&str], flag: bool) -> Result<()> {
        for n in self.resolve(names)? {
            if let Some(p) = self.params.get_mut(&n) {
                p.trainable = flag;
            }
        }
        Ok(())
    }

    pub fn is_trainable(&self, name: &str) -> bool {
        self.params.get(name).is_some_and(|p| p.trainable)
    }

    /// SHA-256 over (name relative to `prefix`, shape, little-endian values)
    /// of every parameter under `prefix`. Two models with identical weights
    /// under different prefixes share a checksum.
    pub fn checksum(&self, prefix: &str) -> String {
        let mut h = Sha256::new();
        for name in self.names_with_prefix(prefix) {
            let p = &self.params[name];
            h.update(name[prefix.len()..].as_bytes());
            for d in p.value.shape() {
                h.update((*d as u64).to_le_bytes());
            }
            for v in p.value.data() {
                h.update(v.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    /// Copies every parameter under `from` to the same relative name under `to`.
    pub fn copy_model(&mut self, from: &str, to: &str) -> Result<()> {
        let names: Vec<String> = self.names_with_prefix(from).cloned().collect();
        if names.is_empty() {
            return Err(FanError::Lookup(format!("no parameters under {from}")));
        }
        for n in names {
            let target = format!("{to}{}", &n[from.len()..]);
            let value = self.params[&n].value.clone();
            match self.params.get_mut(&target) {
                Some(p) => {
                    if p.value.shape() != value.shape() {
                        return Err(FanError::validation(format!("shape mismatch copying {n}")));
                    }
                    p.value = value;
                }
                None => {
                    self.params.insert(
                        target,
                        Param {
                            value,
                            trainable: true,
                        },
                    );
                }
            }
        }
        Ok(())
    }

    pub fn remove_model(&mut self, prefix: &str) {
        let names: Vec<String> = self.names_with_prefix(prefix).cloned().collect();
        for n in names {
            self.params.remove(&n);
        }
    }
}

/// Gradient accumulator keyed by parameter name.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Grads {
    map: BTreeMap<String, Tensor>,
}

impl Grads {
    pub fn accumulate(&mut self, name: &str, shape: &[usize], values: &[f64]) {
        let t = self
            .map
            .entry(name.to_string())
            .or_insert_with(|| Tensor::zeros(shape));
        for (a, b) in t.data_mut().iter_mut().zip(values) {
            *a += b;
        }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.map.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.map.iter()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.map.keys()
    }

    pub fn merge(&mut self, other: &Grads) {
        for (k, v) in &other.map {
            self.accumulate(k, v.shape(), v.data());
        }
    }

    pub fn scale(&mut self, s: f64) {
        for t in self.map.values_mut() {
            t.scale(s);
        }
    }

    /// Sum of `parts` in order, scaled by `s`.
    pub fn sum_scaled(parts: &[Grads], s: f64) -> Grads {
        let mut out = Grads::default();
        for p in parts {
            out.merge(p);
        }
        out.scale(s);
        out
    }

    pub fn is_finite(&self) -> bool {
        self.map.values().all(|t| t.is_finite())
    }

    pub fn retain_prefix(&mut self, prefixes: &[&str]) {
        self.map.retain(|k, _| {
            prefixes
                .iter()
                .any(|p| k.starts_with(p) && k[p.len()..].starts_with('.'))
        });
    }
}
