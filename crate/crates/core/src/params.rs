//! Named parameter storage, initialization, and binding onto a tape.

use std::collections::HashMap;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{lit, Gradients, Real, Tape, Tensor, Var};

/// Ordered collection of named tensors. Insertion order is the canonical
/// order for checkpoints and optimizer state.
#[derive(Clone, Debug)]
pub struct ParamStore<T> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
    index: Arc<HashMap<String, usize>>,
}

impl<T: Real> Default for ParamStore<T> {
    fn default() -> Self {
        ParamStore {
            names: Vec::new(),
            tensors: Vec::new(),
            index: Arc::new(HashMap::new()),
        }
    }
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>) -> Result<()> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::Contract(format!("parameter {name} declared twice")));
        }
        Arc::make_mut(&mut self.index).insert(name.clone(), self.names.len());
        self.names.push(name);
        self.tensors.push(value);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.index.get(name).map(|&i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.index.get(name).map(|&i| &mut self.tensors[i])
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.tensors
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    /// Total number of scalar values.
    pub fn num_values(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
            index: Arc::clone(&self.index),
        }
    }

    /// Registers every parameter as a constant, for forward-only passes.
    pub fn bind_frozen<'t>(&self, tape: &'t Tape<T>) -> BoundParams<'t, T> {
        BoundParams {
            vars: self.tensors.iter().map(|t| tape.constant(t.clone())).collect(),
            index: Arc::clone(&self.index),
        }
    }

    /// Registers every parameter on `tape` as a gradient-requiring leaf.
    pub fn bind<'t>(&self, tape: &'t Tape<T>) -> BoundParams<'t, T> {
        BoundParams {
            vars: self.tensors.iter().map(|t| tape.param(t.clone())).collect(),
            index: Arc::clone(&self.index),
        }
    }
}

/// Parameters registered on one tape, looked up by name.
#[derive(Clone)]
pub struct BoundParams<'t, T: Real> {
    vars: Vec<Var<'t, T>>,
    index: Arc<HashMap<String, usize>>,
}

impl<'t, T: Real> BoundParams<'t, T> {
    /// Pairs names with already-registered variables, for callers that
    /// create the leaves themselves (gradient checks).
    pub fn from_parts(names: &[String], vars: &[Var<'t, T>]) -> Self {
        assert_eq!(names.len(), vars.len(), "one variable per name");
        BoundParams {
            vars: vars.to_vec(),
            index: Arc::new(names.iter().enumerate().map(|(i, n)| (n.clone(), i)).collect()),
        }
    }

    pub fn get(&self, name: &str) -> Result<Var<'t, T>> {
        self.index
            .get(name)
            .map(|&i| self.vars[i])
            .ok_or_else(|| Error::Config(format!("missing parameter {name}")))
    }

    pub fn has(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    /// Gradients of every parameter in store order.
    pub fn gradients(&self, grads: &Gradients<T>) -> Vec<Tensor<T>> {
        self.vars.iter().map(|&v| grads.wrt(v)).collect()
    }
}

/// Seeded initializer that declares parameters into a store.
pub struct Initializer<T: Real> {
    pub store: ParamStore<T>,
    rng: ChaCha8Rng,
}

impl<T: Real> Initializer<T> {
    pub fn new(seed: u64) -> Self {
        Initializer {
            store: ParamStore::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn finish(self) -> ParamStore<T> {
        self.store
    }

    /// Uniform `±bound` entries.
    pub fn uniform(&mut self, name: impl Into<String>, shape: Vec<usize>, bound: f64) -> Result<()> {
        let rng = &mut self.rng;
        let t = Tensor::from_fn(shape, |_| lit(rng.gen_range(-bound..=bound)));
        self.store.insert(name, t)
    }

    pub fn constant(&mut self, name: impl Into<String>, shape: Vec<usize>, value: f64) -> Result<()> {
        self.store.insert(name, Tensor::full(shape, lit(value)))
    }

    pub fn tensor(&mut self, name: impl Into<String>, value: Tensor<T>) -> Result<()> {
        self.store.insert(name, value)
    }

    pub fn rng(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }

    /// `{prefix}.weight` `[fan_in×fan_out]` (Glorot uniform, scaled by
    /// `gain`) and `{prefix}.bias` `[fan_out]` (zeros).
    pub fn linear(&mut self, prefix: &str, fan_in: usize, fan_out: usize, gain: f64) -> Result<()> {
        let bound = gain * (6.0 / (fan_in + fan_out) as f64).sqrt();
        self.uniform(format!("{prefix}.weight"), vec![fan_in, fan_out], bound)?;
        self.constant(format!("{prefix}.bias"), vec![fan_out], 0.0)
    }

    /// `{prefix}.gain` (ones) and `{prefix}.bias` (zeros).
    pub fn layer_norm(&mut self, prefix: &str, d: usize) -> Result<()> {
        self.constant(format!("{prefix}.gain"), vec![d], 1.0)?;
        self.constant(format!("{prefix}.bias"), vec![d], 0.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn duplicate_names_are_rejected() {
        let mut store = ParamStore::<f64>::new();
        store.insert("a", Tensor::zeros(vec![2])).unwrap();
        assert!(matches!(store.insert("a", Tensor::zeros(vec![2])), Err(Error::Contract(_))));
    }

    #[test]
    fn binding_preserves_values_and_order() {
        let mut init = Initializer::<f64>::new(3);
        init.linear("l", 3, 2, 1.0).unwrap();
        init.layer_norm("n", 2).unwrap();
        let store = init.finish();
        assert_eq!(store.names(), ["l.weight", "l.bias", "n.gain", "n.bias"]);
        assert_eq!(store.num_values(), 6 + 2 + 2 + 2);
        let tape = Tape::new();
        let bound = store.bind(&tape);
        assert_eq!(*bound.get("l.weight").unwrap().value(), *store.get("l.weight").unwrap());
        assert!(matches!(bound.get("nope"), Err(Error::Config(_))));
    }

    #[test]
    fn same_seed_same_values() {
        let make = || {
            let mut init = Initializer::<f32>::new(9);
            init.linear("x", 4, 4, 1.0).unwrap();
            init.finish()
        };
        assert_eq!(make().tensors(), make().tensors());
    }
}
