//! Named parameter arrays with stable iteration order for checkpointing.

use std::collections::HashMap;

use ndarray::ArrayD;
use rand::Rng;

use crate::autodiff::Real;
use crate::error::{Error, Result};

/// How a parameter is filled at model construction.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    /// Uniform in `(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
    FanIn(usize),
    Zero,
    One,
}

/// Shape and initializer for one named parameter.
#[derive(Debug, Clone)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

impl ParamSpec {
    pub fn new(name: impl Into<String>, shape: &[usize], init: Init) -> Self {
        Self {
            name: name.into(),
            shape: shape.to_vec(),
            init,
        }
    }
}

/// Ordered map of named arrays; insertion order is the canonical enumeration
/// order used by checkpoints and gradient accumulation.
#[derive(Debug, Clone, PartialEq)]
pub struct ParameterStore<T> {
    entries: Vec<(String, ArrayD<T>)>,
    index: HashMap<String, usize>,
}

impl<T: Real> Default for ParameterStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> ParameterStore<T> {
    pub fn new() -> Self {
        Self {
            entries: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: ArrayD<T>) -> Result<()> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::invalid(format!("duplicate parameter '{name}'")));
        }
        self.index.insert(name.clone(), self.entries.len());
        self.entries.push((name, value));
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&ArrayD<T>> {
        self.index
            .get(name)
            .map(|&i| &self.entries[i].1)
            .ok_or_else(|| Error::invalid(format!("unknown parameter '{name}'")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut ArrayD<T>> {
        match self.index.get(name) {
            Some(&i) => Ok(&mut self.entries[i].1),
            None => Err(Error::invalid(format!("unknown parameter '{name}'"))),
        }
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &ArrayD<T>)> {
        self.entries.iter().map(|(n, a)| (n.as_str(), a))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut ArrayD<T>)> {
        self.entries.iter_mut().map(|(n, a)| (n.as_str(), a))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    /// Total scalar count across all parameters.
    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|(_, a)| a.len()).sum()
    }

    /// Element-wise cast into another scalar type (e.g. f32 -> f64 for
    /// gradient checking).
    pub fn cast<U: Real>(&self) -> ParameterStore<U> {
        let mut out = ParameterStore::new();
        for (name, arr) in &self.entries {
            out.insert(name.clone(), arr.mapv(|v| U::from_f64(v.to_f64_())))
                .expect("names already unique");
        }
        out
    }

    /// Builds a store from specs, drawing fan-in uniform entries from `rng`.
    pub fn init<R: Rng + ?Sized>(specs: &[ParamSpec], rng: &mut R) -> Result<Self> {
        let mut store = Self::new();
        for spec in specs {
            let dim = ndarray::IxDyn(&spec.shape);
            let arr = match spec.init {
                Init::Zero => ArrayD::zeros(dim),
                Init::One => ArrayD::from_elem(dim, T::one()),
                Init::FanIn(fan_in) => {
                    let limit = 1.0 / (fan_in.max(1) as f64).sqrt();
                    ArrayD::from_shape_fn(dim, |_| {
                        T::from_f64(rng.random_range(-limit..limit))
                    })
                }
            };
            store.insert(spec.name.clone(), arr)?;
        }
        Ok(store)
    }
}
