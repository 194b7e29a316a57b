use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::{read_snapshot, write_snapshot, Element, Gradients, Graph, Rng, Tensor, Var};
use crate::util::{create_dir, read_json, write_json};

/// Named parameter tensors, iterated in name order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<T> {
    map: BTreeMap<String, Tensor<T>>,
}

#[derive(Serialize, Deserialize)]
struct Index {
    params: BTreeMap<String, Vec<usize>>,
}

impl<T: Element> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore { map: BTreeMap::new() }
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor<T>) {
        self.map.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.map
            .get(name)
            .ok_or_else(|| Error::Contract(format!("no parameter named {name}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<T>> {
        self.map
            .get_mut(name)
            .ok_or_else(|| Error::Contract(format!("no parameter named {name}")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.map.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<T>)> {
        self.map.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor<T>)> {
        self.map.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.map.keys()
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn numel(&self) -> usize {
        self.map.values().map(Tensor::numel).sum()
    }

    /// Parameters whose names start with `prefix`.
    pub fn subset(&self, prefix: &str) -> ParamStore<T> {
        ParamStore {
            map: self
                .map
                .iter()
                .filter(|(k, _)| k.starts_with(prefix))
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect(),
        }
    }

    pub fn extend(&mut self, other: ParamStore<T>) {
        self.map.extend(other.map);
    }

    pub fn cast<U: Element>(&self) -> ParamStore<U> {
        ParamStore {
            map: self.map.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
        }
    }

    pub fn zeros_like(&self) -> ParamStore<T> {
        ParamStore {
            map: self.map.iter().map(|(k, v)| (k.clone(), Tensor::zeros(v.shape()))).collect(),
        }
    }

    pub fn bit_eq(&self, other: &ParamStore<T>) -> bool {
        self.map.len() == other.map.len()
            && self
                .map
                .iter()
                .zip(&other.map)
                .all(|((ka, va), (kb, vb))| ka == kb && va.bit_eq(vb))
    }

    /// SHA-256 over names, shapes and little-endian payloads.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        let mut buf = Vec::new();
        for (k, v) in &self.map {
            h.update(k.as_bytes());
            for &d in v.shape() {
                h.update((d as u64).to_le_bytes());
            }
            buf.clear();
            for &x in v.data() {
                x.write_le(&mut buf);
            }
            h.update(&buf);
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    /// `<dir>/index.json` plus one snapshot per parameter.
    pub fn save(&self, dir: &Path) -> Result<()> {
        create_dir(dir)?;
        let index = Index {
            params: self.map.iter().map(|(k, v)| (k.clone(), v.shape().to_vec())).collect(),
        };
        write_json(&dir.join("index.json"), &index)?;
        for (k, v) in &self.map {
            write_snapshot(&dir.join(format!("{k}.hptf")), v)?;
        }
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let index: Index = read_json(&dir.join("index.json"))?;
        let mut map = BTreeMap::new();
        for (k, shape) in index.params {
            let path = dir.join(format!("{k}.hptf"));
            let t: Tensor<T> = read_snapshot(&path)?;
            if t.shape() != shape.as_slice() {
                return Err(Error::CorruptPayload {
                    path,
                    reason: format!("shape {:?}, index says {shape:?}", t.shape()),
                });
            }
            map.insert(k, t);
        }
        Ok(ParamStore { map })
    }
}

/// Weight initialisation: truncated normal for matrices and embeddings,
/// zeros for biases, ones for norm gains. Each tensor draws from its own
/// stream, so results do not depend on insertion order.
pub fn init_tensor<T: Element>(seed: u64, name: &str, shape: &[usize], std: f64) -> Tensor<T> {
    if name.ends_with(".bias") || name.ends_with(".beta") {
        return Tensor::zeros(shape);
    }
    if name.ends_with(".gamma") {
        return Tensor::ones(shape);
    }
    let mut rng = Rng::derive(seed, &format!("init/{name}"));
    Tensor::from_fn(shape, |_| T::from_f64(rng.truncated_normal(std)))
}

/// Binds parameters of a store into one graph on first use.
pub struct Binder<'a, T: Element> {
    store: &'a ParamStore<T>,
    trainable: Box<dyn Fn(&str) -> bool + 'a>,
    vars: BTreeMap<String, Var>,
}

impl<'a, T: Element> Binder<'a, T> {
    pub fn new(store: &'a ParamStore<T>, trainable: impl Fn(&str) -> bool + 'a) -> Self {
        Binder {
            store,
            trainable: Box::new(trainable),
            vars: BTreeMap::new(),
        }
    }

    /// Every parameter trainable.
    pub fn all(store: &'a ParamStore<T>) -> Self {
        Self::new(store, |_| true)
    }

    /// Nothing trainable.
    pub fn frozen(store: &'a ParamStore<T>) -> Self {
        Self::new(store, |_| false)
    }

    pub fn store(&self) -> &ParamStore<T> {
        self.store
    }

    pub fn var(&mut self, g: &mut Graph<T>, name: &str) -> Result<Var> {
        if let Some(&v) = self.vars.get(name) {
            return Ok(v);
        }
        let t = self.store.get(name)?.clone();
        let v = g.leaf(t, (self.trainable)(name))?;
        self.vars.insert(name.to_string(), v);
        Ok(v)
    }

    /// Uses `v` for `name` instead of a fresh leaf from the store.
    pub fn bind(&mut self, name: impl Into<String>, v: Var) {
        self.vars.insert(name.into(), v);
    }

    pub fn bound(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }

    /// Gradients of bound trainable parameters, by name.
    pub fn grads(&self, grads: &Gradients<T>) -> ParamGrads<T> {
        let mut out = ParamGrads::default();
        for (k, v) in &self.vars {
            if let Some(t) = grads.get(*v) {
                out.map.insert(k.clone(), t.clone());
            }
        }
        out
    }
}

/// Gradients keyed by parameter name. Parameters missing from the map have
/// zero gradient.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamGrads<T> {
    pub map: BTreeMap<String, Tensor<T>>,
}

impl<T: Element> ParamGrads<T> {
    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.map.get(name)
    }

    /// Element-wise sum; both operands keep a fixed order so the result is
    /// reproducible.
    pub fn accumulate(&mut self, other: ParamGrads<T>) {
        for (k, t) in other.map {
            match self.map.get_mut(&k) {
                Some(acc) => {
                    for (a, &b) in acc.data_mut().iter_mut().zip(t.data()) {
                        *a = *a + b;
                    }
                }
                None => {
                    self.map.insert(k, t);
                }
            }
        }
    }

    pub fn scale(&mut self, c: T) {
        for t in self.map.values_mut() {
            t.data_mut().iter_mut().for_each(|v| *v = *v * c);
        }
    }

    /// Whether any parameter under `prefix` has a nonzero gradient element.
    pub fn any_nonzero(&self, prefix: &str) -> bool {
        self.map
            .iter()
            .filter(|(k, _)| k.starts_with(prefix))
            .any(|(_, t)| t.data().iter().any(|&v| v != T::zero()))
    }

    /// Whether every parameter under `prefix` has an all-zero gradient.
    pub fn all_zero(&self, prefix: &str) -> bool {
        !self.any_nonzero(prefix)
    }

    pub fn bit_eq(&self, other: &ParamGrads<T>) -> bool {
        self.map.len() == other.map.len()
            && self
                .map
                .iter()
                .zip(&other.map)
                .all(|((ka, va), (kb, vb))| ka == kb && va.bit_eq(vb))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn save_load_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let mut s = ParamStore::<f32>::new();
        s.insert("a.weight", init_tensor(1, "a.weight", &[3, 2], 0.02));
        s.insert("a.bias", init_tensor(1, "a.bias", &[2], 0.02));
        s.save(dir.path()).unwrap();
        let back = ParamStore::<f32>::load(dir.path()).unwrap();
        assert!(back.bit_eq(&s));
        assert_eq!(back.checksum(), s.checksum());
    }

    #[test]
    fn init_conventions() {
        let b: Tensor<f64> = init_tensor(0, "x.bias", &[4], 0.02);
        assert!(b.data().iter().all(|&v| v == 0.0));
        let g: Tensor<f64> = init_tensor(0, "x.gamma", &[4], 0.02);
        assert!(g.data().iter().all(|&v| v == 1.0));
        let w: Tensor<f64> = init_tensor(0, "x.weight", &[64], 0.02);
        assert!(w.data().iter().all(|&v| v.abs() <= 0.04));
        assert!(w.data().iter().any(|&v| v != 0.0));
    }

    #[test]
    fn binder_binds_once_and_respects_freeze() {
        let mut s = ParamStore::<f64>::new();
        s.insert("a", Tensor::ones(&[2]));
        s.insert("b", Tensor::ones(&[2]));
        let mut g = Graph::new();
        let mut p = Binder::new(&s, |n| n == "a");
        let a = p.var(&mut g, "a").unwrap();
        assert_eq!(p.var(&mut g, "a").unwrap(), a);
        let b = p.var(&mut g, "b").unwrap();
        let ab = g.mul(a, b).unwrap();
        let loss = g.sum(ab).unwrap();
        let grads = p.grads(&g.backward(loss).unwrap());
        assert!(grads.any_nonzero("a"));
        assert!(grads.get("b").is_none());
    }
}
