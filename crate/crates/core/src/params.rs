//! Named parameter tensors and their binding onto a tape.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tape::{Gradients, Tape, Var};
use crate::tensor::Tensor;

/// Parameters keyed by dotted path, iterated in name order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    map: BTreeMap<String, Tensor>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        self.map.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.map.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.map.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.map.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.map.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.map.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.map.keys().map(String::as_str)
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

    /// Zeros shaped like `self`.
    pub fn zeros_like(&self) -> Self {
        Self {
            map: self
                .map
                .iter()
                .map(|(k, v)| (k.clone(), Tensor::zeros(v.shape())))
                .collect(),
        }
    }

    /// `self += other` for every name present in `other`.
    pub fn accumulate(&mut self, other: &ParamSet) -> Result<()> {
        for (name, g) in other.iter() {
            let dst = self
                .map
                .get_mut(name)
                .ok_or_else(|| Error::invalid(format!("unknown parameter {name}")))?;
            if dst.shape() != g.shape() {
                return Err(Error::ShapeMismatch {
                    op: "accumulate",
                    lhs: dst.shape().to_vec(),
                    rhs: g.shape().to_vec(),
                });
            }
            for (d, s) in dst.data_mut().iter_mut().zip(g.data()) {
                *d += s;
            }
        }
        Ok(())
    }

    /// Euclidean norm over every parameter whose name starts with `prefix`.
    pub fn norm_with_prefix(&self, prefix: &str) -> f64 {
        self.map
            .iter()
            .filter(|(k, _)| k.starts_with(prefix))
            .flat_map(|(_, v)| v.data().iter())
            .map(|x| x * x)
            .sum::<f64>()
            .sqrt()
    }

    pub fn bit_eq(&self, other: &ParamSet) -> bool {
        self.map.len() == other.map.len()
            && self
                .map
                .iter()
                .zip(&other.map)
                .all(|((ka, va), (kb, vb))| ka == kb && va.bit_eq(vb))
    }
}

/// Parameter initializers. Each tensor draws from its own stream keyed by
/// `(seed, name)`, so adding a parameter never perturbs the others.
pub struct Init {
    seed: u64,
}

impl Init {
    pub fn new(seed: u64) -> Self {
        Self { seed }
    }

    pub fn normal(&self, name: &str, shape: &[usize], std: f64) -> Tensor {
        let mut rng = Rng::named(self.seed, name);
        Tensor::from_fn(shape, |_| rng.normal() * std)
    }

    /// Normal with standard deviation `1/sqrt(fan_in)`.
    pub fn fan_in(&self, name: &str, shape: &[usize], fan_in: usize) -> Tensor {
        self.normal(name, shape, 1.0 / (fan_in as f64).sqrt())
    }
}

/// Lazily places parameters on a tape the first time a forward pass asks for
/// them. Frozen binders place constants, so nothing is differentiated.
pub struct Binder<'p> {
    params: &'p ParamSet,
    bound: BTreeMap<String, Var>,
    frozen: bool,
}

impl<'p> Binder<'p> {
    pub fn new(params: &'p ParamSet) -> Self {
        Self {
            params,
            bound: BTreeMap::new(),
            frozen: false,
        }
    }

    pub fn frozen(params: &'p ParamSet) -> Self {
        Self {
            frozen: true,
            ..Self::new(params)
        }
    }

    pub fn params(&self) -> &'p ParamSet {
        self.params
    }

    pub fn get(&mut self, tape: &mut Tape, name: &str) -> Result<Var> {
        if let Some(&v) = self.bound.get(name) {
            return Ok(v);
        }
        let value = self
            .params
            .get(name)
            .ok_or_else(|| Error::invalid(format!("missing parameter {name}")))?
            .clone();
        let v = if self.frozen {
            tape.constant(value)
        } else {
            tape.param(value)
        };
        self.bound.insert(name.to_string(), v);
        Ok(v)
    }

    /// Gradients for every parameter in the set; unbound or unreached ones are
    /// zero.
    pub fn gradients(&self, grads: &Gradients) -> ParamSet {
        let mut out = self.params.zeros_like();
        for (name, &v) in &self.bound {
            if let Some(g) = grads.get(v) {
                out.insert(name.clone(), g.clone());
            }
        }
        out
    }
}
