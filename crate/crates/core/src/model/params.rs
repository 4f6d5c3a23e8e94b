use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor, Var};

/// A named trainable tensor.
#[derive(Debug, Clone)]
pub struct Parameter<T: Real> {
    pub name: String,
    pub var: Var<T>,
}

/// Ordered, uniquely named parameter collection.
#[derive(Debug, Clone, Default)]
pub struct ParamStore<T: Real> {
    params: Vec<Parameter<T>>,
}

/// 64-bit FNV-1a, used to derive per-parameter initialization seeds.
fn fnv1a(s: &str) -> u64 {
    s.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| {
        (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self { params: Vec::new() }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>) -> Result<()> {
        let name = name.into();
        if self.params.iter().any(|p| p.name == name) {
            return Err(Error::Config(format!("duplicate parameter name {name}")));
        }
        self.params.push(Parameter {
            name,
            var: Var::param(value),
        });
        Ok(())
    }

    /// Registers `{name}.weight` (He-normal, seeded by name and `seed`) and a zero `{name}.bias`.
    pub fn add_conv(&mut self, name: &str, cout: usize, cin: usize, k: usize, seed: u64) -> Result<()> {
        let wname = format!("{name}.weight");
        let fan_in = (cin * k * k) as f64;
        let normal = Normal::new(0.0, (2.0 / fan_in).sqrt()).expect("finite std");
        let mut rng = ChaCha8Rng::seed_from_u64(fnv1a(&wname) ^ seed);
        let w = (0..cout * cin * k * k)
            .map(|_| T::of_f64(normal.sample(&mut rng)))
            .collect();
        self.insert(wname, Tensor::new(&[cout, cin, k, k], w)?)?;
        self.insert(format!("{name}.bias"), Tensor::zeros(&[cout]))
    }

    /// Like [`add_conv`](Self::add_conv) but with an all-zero weight, so the
    /// layer starts out emitting its (zero) bias.
    pub fn add_zero_conv(&mut self, name: &str, cout: usize, cin: usize, k: usize) -> Result<()> {
        self.insert(format!("{name}.weight"), Tensor::zeros(&[cout, cin, k, k]))?;
        self.insert(format!("{name}.bias"), Tensor::zeros(&[cout]))
    }

    pub fn get(&self, name: &str) -> Result<&Var<T>> {
        self.params
            .iter()
            .find(|p| p.name == name)
            .map(|p| &p.var)
            .ok_or_else(|| Error::Config(format!("missing parameter {name}")))
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter<T>> {
        self.params.iter()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn names(&self) -> Vec<String> {
        self.params.iter().map(|p| p.name.clone()).collect()
    }

    pub fn values(&self) -> Vec<Tensor<T>> {
        self.params.iter().map(|p| p.var.value().clone()).collect()
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.var.value().len()).sum()
    }

    /// Same names with new values, as trainable leaves.
    pub fn with_values(&self, values: Vec<Tensor<T>>) -> Result<Self> {
        self.rebuild(values, Var::param)
    }

    /// Same names with the given values wrapped as arbitrary vars (e.g. constants).
    pub fn with_vars(&self, vars: Vec<Var<T>>) -> Result<Self> {
        if vars.len() != self.params.len() {
            return Err(Error::Config(format!(
                "expected {} parameters, got {}",
                self.params.len(),
                vars.len()
            )));
        }
        let params = self
            .params
            .iter()
            .zip(vars)
            .map(|(p, var)| {
                if p.var.shape() != var.shape() {
                    return Err(Error::Dimension(format!(
                        "parameter {} has shape {:?}, got {:?}",
                        p.name,
                        p.var.shape(),
                        var.shape()
                    )));
                }
                Ok(Parameter {
                    name: p.name.clone(),
                    var,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self { params })
    }

    fn rebuild(&self, values: Vec<Tensor<T>>, wrap: fn(Tensor<T>) -> Var<T>) -> Result<Self> {
        self.with_vars(values.into_iter().map(wrap).collect())
    }

    /// Constant (gradient-free) copy for inference.
    pub fn detached(&self) -> Self {
        self.rebuild(self.values(), Var::constant)
            .expect("same shapes")
    }

    pub fn zero_grad(&self) {
        self.params.iter().for_each(|p| p.var.zero_grad());
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Parameter {
                    name: p.name.clone(),
                    var: Var::param(p.var.value().cast()),
                })
                .collect(),
        }
    }

    /// Builds a store from `(name, tensor)` pairs, e.g. a loaded checkpoint.
    pub fn from_named(named: Vec<(String, Tensor<T>)>) -> Result<Self> {
        let mut store = Self::new();
        for (name, t) in named {
            store.insert(name, t)?;
        }
        Ok(store)
    }

    /// Checks that `other` has exactly this store's names and shapes.
    pub fn check_compatible(&self, other: &ParamStore<T>) -> Result<()> {
        if self.len() != other.len() {
            return Err(Error::Config(format!(
                "parameter count {} does not match expected {}",
                other.len(),
                self.len()
            )));
        }
        for (a, b) in self.params.iter().zip(&other.params) {
            if a.name != b.name || a.var.shape() != b.var.shape() {
                return Err(Error::Config(format!(
                    "parameter {} {:?} does not match expected {} {:?}",
                    b.name,
                    b.var.shape(),
                    a.name,
                    a.var.shape()
                )));
            }
        }
        Ok(())
    }
}

/// Convolution whose weight and bias live in a [`ParamStore`] under `name`.
pub(crate) fn conv<T: Real>(
    store: &ParamStore<T>,
    name: &str,
    x: &Var<T>,
    pad: usize,
) -> Result<Var<T>> {
    let w = store.get(&format!("{name}.weight"))?;
    let b = store.get(&format!("{name}.bias"))?;
    x.conv2d(w, b, 1, pad)
}
