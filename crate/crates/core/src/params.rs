//! Named parameter registry with trainable/frozen flags and gradient slots.

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::Tape;
use crate::container::{Entry, EntryData, TensorFile};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct ParamEntry {
    pub value: Tensor,
    pub trainable: bool,
    pub grad: Option<Tensor>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    entries: BTreeMap<String, ParamEntry>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor, trainable: bool) {
        self.entries.insert(name.into(), ParamEntry { value, trainable, grad: None });
    }

    pub fn get(&self, name: &str) -> Option<&ParamEntry> {
        self.entries.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut ParamEntry> {
        self.entries.get_mut(name)
    }

    pub fn value(&self, name: &str) -> Result<&Tensor> {
        self.get(name).map(|e| &e.value).ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    pub fn value_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.get_mut(name).map(|e| &mut e.value).ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &ParamEntry)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut ParamEntry)> {
        self.entries.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn with_prefix<'a>(&'a self, prefix: &'a str) -> impl Iterator<Item = (&'a str, &'a ParamEntry)> + 'a {
        self.iter().filter(move |(k, _)| k.starts_with(prefix))
    }

    /// Moves every entry of `other` into `self`.
    pub fn extend(&mut self, other: ParamStore) {
        self.entries.extend(other.entries);
    }

    pub fn set_trainable_prefix(&mut self, prefix: &str, trainable: bool) {
        for (k, e) in self.entries.iter_mut() {
            if k.starts_with(prefix) {
                e.trainable = trainable;
            }
        }
    }

    /// Adds the tape's leaf gradients into the grad slots of trainable
    /// entries. Frozen entries never receive a gradient.
    pub fn accumulate_grads(&mut self, tape: &Tape) {
        for (name, var) in tape.bound_params() {
            let Some(entry) = self.entries.get_mut(name) else { continue };
            if !entry.trainable {
                continue;
            }
            if let Some(g) = tape.grad(var) {
                match &mut entry.grad {
                    Some(acc) => acc.add_assign(g),
                    slot @ None => *slot = Some(g.clone()),
                }
            }
        }
    }

    pub fn zero_grads(&mut self) {
        for e in self.entries.values_mut() {
            e.grad = None;
        }
    }

    pub fn numel_where(&self, pred: impl Fn(&str, &ParamEntry) -> bool) -> usize {
        self.iter().filter(|(k, e)| pred(k, e)).map(|(_, e)| e.value.numel()).sum()
    }

    /// Entries whose name starts with `prefix`, as f64 container entries.
    pub fn to_container(&self, prefix: &str) -> TensorFile {
        let entries = self
            .with_prefix(prefix)
            .map(|(k, e)| Entry {
                name: k.to_string(),
                trainable: e.trainable,
                dims: e.value.shape().to_vec(),
                data: EntryData::F64(e.value.data().to_vec()),
            })
            .collect();
        TensorFile { entries }
    }

    /// Loads float entries of `file`; other dtypes are ignored.
    pub fn from_container(file: &TensorFile) -> Result<Self> {
        let mut store = ParamStore::new();
        for e in &file.entries {
            let data = match &e.data {
                EntryData::F64(v) => v.clone(),
                EntryData::F32(v) => v.iter().map(|&x| x as f64).collect(),
                _ => continue,
            };
            store.insert(e.name.clone(), Tensor::new(&e.dims, data)?, e.trainable);
        }
        Ok(store)
    }
}

/// Weight initializers drawing from a caller-owned RNG.
pub struct Init<'a, R: Rng> {
    pub rng: &'a mut R,
}

impl<R: Rng> Init<'_, R> {
    /// He (Kaiming) normal: N(0, 2 / fan_in).
    pub fn he_normal(&mut self, shape: &[usize], fan_in: usize) -> Tensor {
        self.normal(shape, (2.0 / fan_in as f64).sqrt())
    }

    pub fn normal(&mut self, shape: &[usize], std: f64) -> Tensor {
        let n: usize = shape.iter().product();
        let dist = Normal::new(0.0, std).expect("finite std");
        let data = (0..n).map(|_| dist.sample(self.rng)).collect();
        Tensor::from_parts(shape.to_vec(), data)
    }

    /// Registers a trainable conv weight `[cout, cin_g, k, k]` (He, fan-in
    /// `cin_g*k*k`) and a zero bias under `{name}.weight` / `{name}.bias`.
    pub fn conv(&mut self, store: &mut ParamStore, name: &str, cout: usize, cin_g: usize, k: usize, trainable: bool) {
        let w = self.he_normal(&[cout, cin_g, k, k], cin_g * k * k);
        store.insert(format!("{name}.weight"), w, trainable);
        store.insert(format!("{name}.bias"), Tensor::zeros(&[cout]), trainable);
    }

    /// Linear weight `[dout, din]` (He, fan-in `din`) and zero bias.
    pub fn linear(&mut self, store: &mut ParamStore, name: &str, dout: usize, din: usize, trainable: bool) {
        let w = self.he_normal(&[dout, din], din);
        store.insert(format!("{name}.weight"), w, trainable);
        store.insert(format!("{name}.bias"), Tensor::zeros(&[dout]), trainable);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn frozen_entries_get_no_grad() {
        let mut store = ParamStore::new();
        store.insert("a", Tensor::ones(&[2]), true);
        store.insert("b", Tensor::ones(&[2]), false);
        let mut tape = Tape::new();
        let a = tape.param(&store, "a").unwrap();
        let b = tape.param(&store, "b").unwrap();
        assert_eq!(tape.param(&store, "a").unwrap(), a);
        let p = tape.mul(a, b).unwrap();
        let s = tape.sum(p);
        tape.backward(s).unwrap();
        store.accumulate_grads(&tape);
        assert!(store.get("a").unwrap().grad.is_some());
        assert!(store.get("b").unwrap().grad.is_none());
    }

    #[test]
    fn container_roundtrip() {
        let mut store = ParamStore::new();
        store.insert("m.w", Tensor::new(&[2, 2], vec![1.0, -2.5, 3.0, 1e-300]).unwrap(), true);
        store.insert("m.b", Tensor::zeros(&[2]), false);
        let back = ParamStore::from_container(&store.to_container("")).unwrap();
        assert_eq!(back, store);
    }
}
