use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::numerics::rng::{name_key, CounterRng};
use crate::numerics::{Scalar, Tensor};

pub const BN_EPSILON: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ParamKind {
    Weight,
    Bias,
    NormGain,
    NormBias,
    MixCoefficient,
}

/// How a parameter is filled when it is registered.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    /// Normal(0, sqrt(2 / fan_in)).
    He { fan_in: usize },
    Zeros,
    Const(f64),
}

/// Handle to a learnable tensor inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

/// Handle to a normalization layer's running statistics.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NormId(pub(crate) usize);

#[derive(Clone, Debug)]
pub struct Parameter<T> {
    pub name: String,
    pub kind: ParamKind,
    pub value: Tensor<T>,
    pub grad: Option<Tensor<T>>,
}

/// Running statistics of one batch-normalization layer.
#[derive(Clone, Debug, PartialEq)]
pub struct NormState<T> {
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
    momentum: f64,
    epsilon: f64,
}

impl<T: Scalar> NormState<T> {
    pub fn new(channels: usize, momentum: f64, epsilon: f64) -> Result<Self> {
        if !(epsilon > 0.0) {
            return Err(Error::Config(format!("normalization epsilon must be positive, got {epsilon}")));
        }
        if !(momentum > 0.0 && momentum < 1.0) {
            return Err(Error::Config(format!("normalization momentum must lie in (0,1), got {momentum}")));
        }
        Ok(Self { running_mean: vec![T::zero(); channels], running_var: vec![T::one(); channels], momentum, epsilon })
    }

    pub fn channels(&self) -> usize {
        self.running_mean.len()
    }

    pub fn momentum(&self) -> f64 {
        self.momentum
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    /// `running = (1 - m) · running + m · batch`.
    pub fn update(&mut self, batch_mean: &[T], batch_var: &[T]) {
        let m = T::of(self.momentum);
        let keep = T::one() - m;
        for (r, &b) in self.running_mean.iter_mut().zip(batch_mean) {
            *r = keep * *r + m * b;
        }
        for (r, &b) in self.running_var.iter_mut().zip(batch_var) {
            *r = (keep * *r + m * b).max(T::zero());
        }
    }
}

/// Named learnable tensors plus the running statistics of every
/// normalization layer in a model.
#[derive(Clone, Debug)]
pub struct ParamStore<T> {
    seed: u64,
    params: Vec<Parameter<T>>,
    by_name: HashMap<String, usize>,
    norms: Vec<(String, NormState<T>)>,
    norm_by_name: HashMap<String, usize>,
}

impl<T: Scalar> ParamStore<T> {
    /// Empty store; `seed` keys the initialization of every parameter added later.
    pub fn new(seed: u64) -> Self {
        Self { seed, params: Vec::new(), by_name: HashMap::new(), norms: Vec::new(), norm_by_name: HashMap::new() }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Registers a parameter. Each name draws from its own random
    /// substream, so values do not depend on registration order.
    pub fn add(&mut self, name: impl Into<String>, kind: ParamKind, shape: &[usize], init: Init) -> Result<ParamId> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(Error::DuplicateName(name));
        }
        let value = match init {
            Init::Zeros => Tensor::zeros(shape),
            Init::Const(v) => Tensor::full(shape, T::of(v)),
            Init::He { fan_in } => {
                let std = (2.0 / fan_in.max(1) as f64).sqrt();
                let mut rng = CounterRng::new(self.seed).substream(name_key(&name));
                Tensor::from_fn(shape, |_| T::of(std * rng.normal()))
            }
        };
        let id = self.params.len();
        self.by_name.insert(name.clone(), id);
        self.params.push(Parameter { name, kind, value, grad: None });
        Ok(ParamId(id))
    }

    pub fn add_norm(&mut self, name: impl Into<String>, channels: usize) -> Result<NormId> {
        let name = name.into();
        if self.norm_by_name.contains_key(&name) {
            return Err(Error::DuplicateName(name));
        }
        let id = self.norms.len();
        self.norm_by_name.insert(name.clone(), id);
        self.norms.push((name, NormState::new(channels, BN_MOMENTUM, BN_EPSILON)?));
        Ok(NormId(id))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).map(|&i| ParamId(i))
    }

    pub fn get(&self, id: ParamId) -> &Parameter<T> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter<T> {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id.0].value
    }

    pub fn by_name(&self, name: &str) -> Result<&Parameter<T>> {
        self.id(name).map(|id| self.get(id)).ok_or_else(|| Error::UnknownTensor(name.to_string()))
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter<T>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter<T>> {
        self.params.iter_mut()
    }

    pub fn norm(&self, id: NormId) -> &NormState<T> {
        &self.norms[id.0].1
    }

    pub fn norm_mut(&mut self, id: NormId) -> &mut NormState<T> {
        &mut self.norms[id.0].1
    }

    pub fn norm_by_name(&self, name: &str) -> Option<&NormState<T>> {
        self.norm_by_name.get(name).map(|&i| &self.norms[i].1)
    }

    pub fn norm_by_name_mut(&mut self, name: &str) -> Option<&mut NormState<T>> {
        self.norm_by_name.get(name).copied().map(|i| &mut self.norms[i].1)
    }

    pub fn norms(&self) -> impl Iterator<Item = (&str, &NormState<T>)> {
        self.norms.iter().map(|(n, s)| (n.as_str(), s))
    }

    /// Total number of learnable scalar elements.
    pub fn element_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Learnable elements whose name starts with `prefix`.
    pub fn element_count_with_prefix(&self, prefix: &str) -> usize {
        self.params.iter().filter(|p| p.name.starts_with(prefix)).map(|p| p.value.len()).sum()
    }

    /// Sets every gradient to an all-zero buffer of the parameter's shape.
    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            match &mut p.grad {
                Some(g) => g.data_mut().iter_mut().for_each(|v| *v = T::zero()),
                None => p.grad = Some(Tensor::zeros(p.value.shape())),
            }
        }
    }

    pub fn clear_grads(&mut self) {
        for p in &mut self.params {
            p.grad = None;
        }
    }

    /// Converts every value and running statistic to another scalar type.
    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            seed: self.seed,
            params: self
                .params
                .iter()
                .map(|p| Parameter {
                    name: p.name.clone(),
                    kind: p.kind,
                    value: p.value.cast(),
                    grad: p.grad.as_ref().map(Tensor::cast),
                })
                .collect(),
            by_name: self.by_name.clone(),
            norms: self
                .norms
                .iter()
                .map(|(n, s)| {
                    (
                        n.clone(),
                        NormState {
                            running_mean: s.running_mean.iter().map(|v| U::of(v.as_f64())).collect(),
                            running_var: s.running_var.iter().map(|v| U::of(v.as_f64())).collect(),
                            momentum: s.momentum,
                            epsilon: s.epsilon,
                        },
                    )
                })
                .collect(),
            norm_by_name: self.norm_by_name.clone(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_are_unique() {
        let mut ps = ParamStore::<f32>::new(0);
        ps.add("a", ParamKind::Weight, &[2], Init::Zeros).unwrap();
        assert!(matches!(ps.add("a", ParamKind::Bias, &[2], Init::Zeros), Err(Error::DuplicateName(_))));
        ps.add_norm("bn", 3).unwrap();
        assert!(ps.add_norm("bn", 3).is_err());
    }

    #[test]
    fn init_is_independent_of_registration_order() {
        let mut a = ParamStore::<f64>::new(9);
        a.add("x", ParamKind::Weight, &[4, 4], Init::He { fan_in: 4 }).unwrap();
        a.add("y", ParamKind::Weight, &[4, 4], Init::He { fan_in: 4 }).unwrap();
        let mut b = ParamStore::<f64>::new(9);
        b.add("y", ParamKind::Weight, &[4, 4], Init::He { fan_in: 4 }).unwrap();
        b.add("x", ParamKind::Weight, &[4, 4], Init::He { fan_in: 4 }).unwrap();
        assert_eq!(a.by_name("x").unwrap().value, b.by_name("x").unwrap().value);
        assert_ne!(a.by_name("x").unwrap().value, a.by_name("y").unwrap().value);
    }

    #[test]
    fn norm_state_validation_and_update() {
        assert!(NormState::<f32>::new(2, 0.1, 0.0).is_err());
        assert!(NormState::<f32>::new(2, 1.5, 1e-5).is_err());
        let mut s = NormState::<f64>::new(2, 0.1, 1e-5).unwrap();
        s.update(&[1.0, 2.0], &[3.0, 0.0]);
        assert!((s.running_mean[0] - 0.1).abs() < 1e-15);
        assert!((s.running_var[0] - 1.2).abs() < 1e-15);
        assert!((s.running_var[1] - 0.9).abs() < 1e-15);
    }
}
