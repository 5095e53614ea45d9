use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::NumericsError;

/// Index of a tensor inside a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

/// Named, ordered collection of learnable tensors.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        assert!(!self.names.contains(&name), "duplicate parameter {name}");
        self.names.push(name);
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Total number of scalar entries.
    pub fn numel(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.values
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.values
    }

    /// Places every parameter on `tape` as a gradient-tracked leaf.
    pub fn bind<'t>(&self, tape: &'t Tape) -> Bound<'t> {
        Bound { vars: self.values.iter().map(|t| tape.param(t.clone())).collect() }
    }

    /// Places every parameter on `tape` as a constant.
    pub fn bind_frozen<'t>(&self, tape: &'t Tape) -> Bound<'t> {
        Bound { vars: self.values.iter().map(|t| tape.constant(t.clone())).collect() }
    }

    pub fn to_named(&self) -> BTreeMap<String, NamedTensor> {
        self.names
            .iter()
            .zip(&self.values)
            .map(|(n, t)| (n.clone(), NamedTensor { shape: t.shape().to_vec(), values: t.values().to_vec() }))
            .collect()
    }

    /// Overwrites values from a name-keyed map. Every parameter must be
    /// present with a matching shape; extra names are rejected.
    pub fn load_named(&mut self, named: &BTreeMap<String, NamedTensor>) -> Result<(), NumericsError> {
        for name in named.keys() {
            if !self.names.contains(name) {
                return Err(NumericsError::UnknownParam(name.clone()));
            }
        }
        for (name, slot) in self.names.iter().zip(self.values.iter_mut()) {
            let t = named.get(name).ok_or_else(|| NumericsError::MissingParam(name.clone()))?;
            if t.shape != slot.shape() || t.shape.iter().product::<usize>() != t.values.len() {
                return Err(NumericsError::ParamShape { name: name.clone(), expected: slot.shape().to_vec(), got: t.shape.clone() });
            }
            *slot = Tensor::new(t.shape.clone(), t.values.clone());
        }
        Ok(())
    }
}

/// Serialized form of one parameter tensor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedTensor {
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

/// Parameters of a [`ParamStore`] placed on a tape.
#[derive(Debug, Clone)]
pub struct Bound<'t> {
    vars: Vec<Var<'t>>,
}

impl<'t> Bound<'t> {
    pub fn var(&self, id: ParamId) -> Var<'t> {
        self.vars[id.0]
    }

    pub fn vars(&self) -> &[Var<'t>] {
        &self.vars
    }
}

/// Weight and bias of an affine map `x ↦ W x + b`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LinearParams {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl LinearParams {
    /// Weights uniform in `±sqrt(1/in_dim)`, bias zero.
    pub fn init(store: &mut ParamStore, name: &str, in_dim: usize, out_dim: usize, rng: &mut impl Rng) -> Self {
        assert!(in_dim >= 1 && out_dim >= 1, "linear dims must be positive");
        let bound = (1.0 / in_dim as f64).sqrt();
        let w: Vec<f64> = (0..in_dim * out_dim).map(|_| rng.random_range(-bound..bound)).collect();
        let weight = store.insert(format!("{name}.weight"), Tensor::new(vec![out_dim, in_dim], w));
        let bias = store.insert(format!("{name}.bias"), Tensor::zeros(&[out_dim]));
        Self { weight, bias, in_dim, out_dim }
    }

    pub fn forward<'t>(&self, x: Var<'t>, p: &Bound<'t>) -> Var<'t> {
        x.linear(p.var(self.weight), p.var(self.bias))
    }
}

/// Gain and shift of a layer normalization.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NormParams {
    pub gain: ParamId,
    pub shift: ParamId,
}

impl NormParams {
    pub fn init(store: &mut ParamStore, name: &str, d: usize) -> Self {
        let gain = store.insert(format!("{name}.gain"), Tensor::full(&[d], 1.0));
        let shift = store.insert(format!("{name}.shift"), Tensor::zeros(&[d]));
        Self { gain, shift }
    }

    pub fn forward<'t>(&self, x: Var<'t>, p: &Bound<'t>) -> Var<'t> {
        x.layer_norm(p.var(self.gain), p.var(self.shift))
    }
}

/// Standard-normal vector, used for unconstrained raw parameters.
pub fn normal_vector(n: usize, rng: &mut impl Rng) -> Tensor {
    Tensor::vector((0..n).map(|_| StandardNormal.sample(rng)).collect())
}
