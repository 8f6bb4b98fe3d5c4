use std::fmt::{Debug, Display};
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use indexmap::IndexMap;
use num_traits::Float;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::config::{Init, ModelConfig};
use crate::error::{Error, Result};

/// Floating-point element type. `f32` is the storage precision; `f64` is used
/// for gradient checks and exactness tests.
pub trait Scalar:
    Float
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + 'static
{
    fn of(x: f64) -> Self;
    fn f64(self) -> f64;
    fn erf(self) -> Self;
}

impl Scalar for f32 {
    fn of(x: f64) -> Self {
        x as f32
    }
    fn f64(self) -> f64 {
        self as f64
    }
    fn erf(self) -> Self {
        libm::erff(self)
    }
}

impl Scalar for f64 {
    fn of(x: f64) -> Self {
        x
    }
    fn f64(self) -> f64 {
        self
    }
    fn erf(self) -> Self {
        libm::erf(self)
    }
}

pub const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    pub shape: Vec<usize>,
    pub data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn zeros(shape: &[usize]) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![T::zero(); shape.iter().product()],
        }
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| U::of(x.f64())).collect(),
        }
    }
}

/// All trainable tensors of one model, in layout order.
#[derive(Debug, Clone, PartialEq)]
pub struct ParameterSet<T = f32> {
    pub config: ModelConfig,
    tensors: IndexMap<String, Tensor<T>>,
}

impl<T: Scalar> ParameterSet<T> {
    /// Zero-filled tensors with the config's layout (used for gradients and moments).
    pub fn zeros(config: &ModelConfig) -> Self {
        let tensors = config
            .layout()
            .into_iter()
            .map(|(name, shape, _)| (name, Tensor::zeros(&shape)))
            .collect();
        Self {
            config: config.clone(),
            tensors,
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(&self.config)
    }

    /// Builds a set from named tensors, checking names, order and shapes against the config.
    pub fn from_tensors(
        config: ModelConfig,
        tensors: impl IntoIterator<Item = (String, Tensor<T>)>,
    ) -> Result<Self> {
        config.validate()?;
        let tensors: IndexMap<String, Tensor<T>> = tensors.into_iter().collect();
        let layout = config.layout();
        if tensors.len() != layout.len() {
            return Err(Error::Integrity(format!(
                "expected {} tensors, found {}",
                layout.len(),
                tensors.len()
            )));
        }
        for ((name, shape, _), (got_name, t)) in layout.iter().zip(&tensors) {
            if name != got_name {
                return Err(Error::Integrity(format!(
                    "tensor `{got_name}` found where `{name}` was expected"
                )));
            }
            if &t.shape != shape || t.data.len() != shape.iter().product::<usize>() {
                return Err(Error::Integrity(format!(
                    "tensor `{name}` has shape {:?}, expected {shape:?}",
                    t.shape
                )));
            }
        }
        Ok(Self { config, tensors })
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.tensors.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<T>)> {
        self.tensors.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub(crate) fn at(&self, idx: usize) -> &[T] {
        &self.tensors[idx].data
    }

    pub(crate) fn at_mut(&mut self, idx: usize) -> &mut [T] {
        &mut self.tensors[idx].data
    }

    pub fn n_params(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    pub fn cast<U: Scalar>(&self) -> ParameterSet<U> {
        ParameterSet {
            config: self.config.clone(),
            tensors: self
                .tensors
                .iter()
                .map(|(k, t)| (k.clone(), t.cast()))
                .collect(),
        }
    }

    /// First tensor holding a NaN or infinity.
    pub fn first_non_finite(&self) -> Option<&str> {
        self.iter()
            .find(|(_, t)| t.data.iter().any(|x| !x.is_finite()))
            .map(|(n, _)| n)
    }

    /// Elementwise `self += scale * other`.
    pub fn add_scaled(&mut self, other: &Self, scale: T) {
        for (a, b) in self.tensors.values_mut().zip(other.tensors.values()) {
            for (x, &y) in a.data.iter_mut().zip(&b.data) {
                *x += scale * y;
            }
        }
    }

    pub fn scale(&mut self, s: T) {
        for t in self.tensors.values_mut() {
            for x in &mut t.data {
                *x *= s;
            }
        }
    }

    /// Name to shape map, in layout order.
    pub fn shape_manifest(&self) -> IndexMap<String, Vec<usize>> {
        self.iter()
            .map(|(n, t)| (n.to_string(), t.shape.clone()))
            .collect()
    }
}

/// Random initialization: weights from N(0, 0.02²) truncated at ±2σ (by
/// rejection), biases zero, normalization gains one. Deterministic in `config.seed`.
pub fn init_model<T: Scalar>(config: &ModelConfig) -> Result<ParameterSet<T>> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let normal = Normal::new(0.0, INIT_STD).expect("valid std");
    let tensors = config.layout().into_iter().map(|(name, shape, init)| {
        let n: usize = shape.iter().product();
        let data = match init {
            Init::Zeros => vec![T::zero(); n],
            Init::Ones => vec![T::one(); n],
            Init::Normal => (0..n)
                .map(|_| loop {
                    let x: f64 = normal.sample(&mut rng);
                    if x.abs() <= 2.0 * INIT_STD {
                        break T::of(x);
                    }
                })
                .collect(),
        };
        (name, Tensor { shape, data })
    });
    ParameterSet::from_tensors(config.clone(), tensors.collect::<Vec<_>>())
}

/// Shape manifest computed from the config alone.
pub fn shape_manifest(config: &ModelConfig) -> IndexMap<String, Vec<usize>> {
    config
        .layout()
        .into_iter()
        .map(|(n, s, _)| (n, s))
        .collect()
}
