//! Named parameter storage and binding onto a tape.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::ndtensor::{substream, uniform_vec, Element, Gradients, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn from_index(i: usize) -> Self {
        ParamId(i)
    }

    pub fn index(self) -> usize {
        self.0
    }
}

/// Ordered collection of named parameter tensors.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
}

impl<T: Element> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            names: Vec::new(),
            tensors: Vec::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor<T>) -> Result<ParamId> {
        let name = name.into();
        if self.names.contains(&name) {
            return Err(Error::InvalidArgument(format!("duplicate parameter name `{name}`")));
        }
        self.names.push(name);
        self.tensors.push(tensor.with_requires_grad());
        Ok(ParamId(self.tensors.len() - 1))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.tensors
    }

    pub fn count(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Scalar counts grouped by the first `depth` dot-separated name segments.
    pub fn breakdown(&self, depth: usize) -> BTreeMap<String, usize> {
        let mut out = BTreeMap::new();
        for (name, t) in self.iter() {
            let key = name.split('.').take(depth).collect::<Vec<_>>().join(".");
            *out.entry(key).or_insert(0) += t.numel();
        }
        out
    }

    /// Records every parameter on `tape`. With `trainable == false` they are
    /// bound as constants and no graph is built.
    pub fn bind(&self, tape: &Tape<T>, trainable: bool) -> Bound {
        Bound {
            vars: self
                .tensors
                .iter()
                .map(|t| if trainable { tape.param(t) } else { tape.constant(t.clone()) })
                .collect(),
        }
    }

    /// Overwrites each parameter's gradient slot from a backward pass.
    pub fn assign_grads(&mut self, bound: &Bound, grads: &Gradients<T>) -> Result<()> {
        for (t, &v) in self.tensors.iter_mut().zip(&bound.vars) {
            let g = grads.wrt(v)?;
            t.set_grad(g.into_data())?;
        }
        Ok(())
    }

    pub fn clear_grads(&mut self) {
        self.tensors.iter_mut().for_each(Tensor::clear_grad);
    }

    /// FNV-1a digest over names, shapes and raw values.
    pub fn fingerprint(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut feed = |bytes: &[u8]| {
            for &b in bytes {
                h ^= b as u64;
                h = h.wrapping_mul(0x0000_0100_0000_01b3);
            }
        };
        let mut buf = Vec::new();
        for (name, t) in self.iter() {
            feed(name.as_bytes());
            for &d in t.shape() {
                feed(&(d as u64).to_le_bytes());
            }
            buf.clear();
            t.data().iter().for_each(|v| v.write_le(&mut buf));
            feed(&buf);
        }
        h
    }
}

/// Tape handles for every parameter of a store, indexed by [`ParamId`].
#[derive(Clone, Debug)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    /// Wraps handles in store order, e.g. the variables a gradient check hands out.
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Bound { vars }
    }

    pub fn get(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

/// Deterministic initializer: every parameter draws from its own substream
/// keyed by name, so adding a parameter never shifts the others.
pub struct Initializer {
    seed: u64,
}

impl Initializer {
    pub fn new(seed: u64) -> Self {
        Initializer { seed }
    }

    pub fn uniform<T: Element>(&self, name: &str, shape: &[usize], bound: f64) -> Result<Tensor<T>> {
        self.uniform_range(name, shape, -bound, bound)
    }

    pub fn uniform_range<T: Element>(&self, name: &str, shape: &[usize], lo: f64, hi: f64) -> Result<Tensor<T>> {
        let mut rng = substream(self.seed, &format!("init/{name}"));
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), uniform_vec(&mut rng, n, lo, hi)?)
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_are_unique_and_counted() {
        let mut s = ParamStore::<f32>::new();
        let a = s.add("blocks.0.w", Tensor::zeros(vec![2, 3]).unwrap()).unwrap();
        s.add("blocks.1.w", Tensor::zeros(vec![4]).unwrap()).unwrap();
        s.add("head.b", Tensor::zeros(vec![5]).unwrap()).unwrap();
        assert!(s.add("head.b", Tensor::zeros(vec![1]).unwrap()).is_err());
        assert_eq!(s.count(), 15);
        assert_eq!(s.name(a), "blocks.0.w");
        let b = s.breakdown(1);
        assert_eq!(b["blocks"], 10);
        assert_eq!(b.values().sum::<usize>(), s.count());
    }

    #[test]
    fn initializer_is_keyed_by_name() {
        let init = Initializer::new(3);
        let a: Tensor<f64> = init.uniform("x", &[4], 1.0).unwrap();
        let b: Tensor<f64> = init.uniform("x", &[4], 1.0).unwrap();
        let c: Tensor<f64> = init.uniform("y", &[4], 1.0).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }
}
