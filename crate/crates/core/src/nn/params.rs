//! Named parameter storage.

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use super::tape::{Tape, Var};
use super::tensor::Tensor;

/// Named f32 arrays, iterated in name order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    tensors: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds a tensor. Panics on a duplicate name.
    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        let name = name.into();
        assert!(!self.tensors.contains_key(&name), "duplicate parameter {name}");
        self.tensors.insert(name, value);
    }

    /// Normal(0, std) truncated at two standard deviations.
    pub fn insert_trunc_normal<R: Rng>(&mut self, name: &str, shape: &[usize], std: f32, rng: &mut R) {
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| loop {
                let v: f32 = StandardNormal.sample(rng);
                if v.abs() <= 2.0 {
                    break v * std;
                }
            })
            .collect();
        self.insert(name, Tensor::new(shape.to_vec(), data));
    }

    pub fn get(&self, name: &str) -> &Tensor {
        self.tensors
            .get(name)
            .unwrap_or_else(|| panic!("no parameter named {name}"))
    }

    pub fn try_get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Tensor {
        self.tensors
            .get_mut(name)
            .unwrap_or_else(|| panic!("no parameter named {name}"))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.tensors.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total number of scalars.
    pub fn scalar_count(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    /// Keeps only the tensors whose name satisfies `keep`.
    pub fn filter(&self, keep: impl Fn(&str) -> bool) -> ParamStore {
        ParamStore {
            tensors: self
                .tensors
                .iter()
                .filter(|(k, _)| keep(k))
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect(),
        }
    }

    /// Places every tensor on `tape`, as differentiable inputs when `trainable`.
    pub fn bind<'t>(&self, tape: &'t Tape, trainable: bool) -> Bound<'t> {
        let vars = self
            .tensors
            .iter()
            .map(|(k, v)| {
                let var = if trainable {
                    tape.var(v.clone())
                } else {
                    tape.constant(v.clone())
                };
                (k.clone(), var)
            })
            .collect();
        Bound { vars }
    }
}

/// A [`ParamStore`] placed on a tape.
pub struct Bound<'t> {
    vars: BTreeMap<String, Var<'t>>,
}

impl<'t> Bound<'t> {
    pub fn get(&self, name: &str) -> Var<'t> {
        *self
            .vars
            .get(name)
            .unwrap_or_else(|| panic!("no parameter named {name}"))
    }

    pub fn try_get(&self, name: &str) -> Option<Var<'t>> {
        self.vars.get(name).copied()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.vars.keys().map(String::as_str)
    }

    pub fn vars(&self) -> Vec<Var<'t>> {
        self.vars.values().copied().collect()
    }

    /// Gradient of `loss` for every parameter, as a store aligned by name.
    pub fn grads(&self, loss: Var<'t>) -> ParamStore {
        let vars = self.vars();
        let grads = loss.tape().grad(loss, &vars, None, false);
        let mut out = ParamStore::new();
        for (name, g) in self.vars.keys().zip(grads) {
            out.insert(name.clone(), g.value());
        }
        out
    }
}
