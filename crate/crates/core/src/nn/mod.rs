//! Named parameter sets, layers, and optimizers on top of [`crate::autograd`].

mod optim;

use indexmap::IndexMap;
use rand::Rng;
use sha2::{Digest, Sha256};

use crate::autograd::{Grads, Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

pub use optim::{Adam, AdamConfig, Optimizer, Sgd};

/// Ordered collection of named parameter tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSet<S> {
    params: IndexMap<String, Tensor<S>>,
}

impl<S: Scalar> Default for ParamSet<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> ParamSet<S> {
    pub fn new() -> Self {
        Self { params: IndexMap::new() }
    }

    /// Adds a parameter and returns its slot index.
    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<S>) -> usize {
        let (idx, _) = self.params.insert_full(name.into(), value);
        idx
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<S>> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<S>> {
        self.params.get_mut(name)
    }

    pub fn by_index(&self, idx: usize) -> &Tensor<S> {
        &self.params[idx]
    }

    pub fn by_index_mut(&mut self, idx: usize) -> &mut Tensor<S> {
        &mut self.params[idx]
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<S>)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn num_scalars(&self) -> usize {
        self.params.values().map(Tensor::numel).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.params.values().all(Tensor::is_finite)
    }

    /// Same names and shapes, every entry zero.
    pub fn zeros_like(&self) -> Self {
        Self { params: self.params.iter().map(|(k, v)| (k.clone(), Tensor::zeros(v.shape()))).collect() }
    }

    pub fn cast<T: Scalar>(&self) -> ParamSet<T> {
        ParamSet { params: self.params.iter().map(|(k, v)| (k.clone(), v.cast())).collect() }
    }

    /// Replaces values by name; names and shapes must match exactly.
    pub fn load_from(&mut self, other: &ParamSet<S>) -> Result<()> {
        if self.params.len() != other.params.len() {
            return Err(Error::Validation(format!(
                "parameter count mismatch: {} vs {}",
                self.params.len(),
                other.params.len()
            )));
        }
        for (name, value) in self.params.iter_mut() {
            let src = other
                .get(name)
                .ok_or_else(|| Error::Validation(format!("missing parameter {name}")))?;
            if src.shape() != value.shape() {
                return Err(Error::Shape(format!("{name}: {:?} vs {:?}", src.shape(), value.shape())));
            }
            *value = src.clone();
        }
        Ok(())
    }

    /// SHA-256 over names, shapes and the exact bit patterns of all values.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for (name, t) in &self.params {
            h.update(name.as_bytes());
            for &d in t.shape() {
                h.update((d as u64).to_le_bytes());
            }
            for v in t.data() {
                h.update(v.as_f64().to_bits().to_le_bytes());
            }
        }
        hex_digest(&h.finalize())
    }

    /// Puts every parameter on `g` as a leaf.
    pub fn bind(&self, g: &mut Graph<S>, trainable: bool) -> Bound {
        Bound { vars: self.params.values().map(|t| g.leaf(t.clone(), trainable)).collect() }
    }
}

pub(crate) fn hex_digest(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Graph handles for a [`ParamSet`], aligned with its slot indices.
#[derive(Clone, Debug)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn var(&self, idx: usize) -> Var {
        self.vars[idx]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    /// Pulls this set's gradients out of `grads`, in slot order.
    pub fn grads<S: Scalar>(&self, grads: &mut Grads<S>) -> Vec<Option<Tensor<S>>> {
        self.vars.iter().map(|&v| grads.take(v)).collect()
    }
}

/// Fan-in scaled normal initialization.
fn init_weight<S: Scalar, R: Rng + ?Sized>(shape: &[usize], fan_in: usize, rng: &mut R) -> Tensor<S> {
    Tensor::randn(shape, (2.0 / fan_in as f64).sqrt() * 0.7, rng)
}

#[derive(Clone, Debug)]
pub struct Linear {
    w: usize,
    b: usize,
    pub in_features: usize,
    pub out_features: usize,
}

impl Linear {
    pub fn new<S: Scalar, R: Rng + ?Sized>(
        ps: &mut ParamSet<S>,
        name: &str,
        in_features: usize,
        out_features: usize,
        rng: &mut R,
    ) -> Self {
        let w = ps.insert(format!("{name}.weight"), init_weight(&[out_features, in_features], in_features, rng));
        let b = ps.insert(format!("{name}.bias"), Tensor::zeros(&[out_features]));
        Self { w, b, in_features, out_features }
    }

    pub fn forward<S: Scalar>(&self, g: &mut Graph<S>, p: &Bound, x: Var) -> Result<Var> {
        let y = g.linear(x, p.var(self.w))?;
        g.bias_channels(y, p.var(self.b))
    }

    pub fn weight_slot(&self) -> usize {
        self.w
    }

    pub fn bias_slot(&self) -> usize {
        self.b
    }
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    w: usize,
    b: usize,
    stride: usize,
    pad: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<S: Scalar, R: Rng + ?Sized>(
        ps: &mut ParamSet<S>,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        rng: &mut R,
    ) -> Self {
        let fan_in = cin * kernel * kernel;
        let w = ps.insert(format!("{name}.weight"), init_weight(&[cout, cin, kernel, kernel], fan_in, rng));
        let b = ps.insert(format!("{name}.bias"), Tensor::zeros(&[cout]));
        Self { w, b, stride, pad }
    }

    pub fn forward<S: Scalar>(&self, g: &mut Graph<S>, p: &Bound, x: Var) -> Result<Var> {
        let y = g.conv2d(x, p.var(self.w), self.stride, self.pad)?;
        g.bias_channels(y, p.var(self.b))
    }

    pub fn weight_slot(&self) -> usize {
        self.w
    }

    pub fn bias_slot(&self) -> usize {
        self.b
    }
}

#[derive(Clone, Debug)]
pub struct ConvTranspose2d {
    w: usize,
    b: usize,
    stride: usize,
    pad: usize,
}

impl ConvTranspose2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<S: Scalar, R: Rng + ?Sized>(
        ps: &mut ParamSet<S>,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        rng: &mut R,
    ) -> Self {
        // Each output pixel receives about cin * (kernel / stride)^2 terms.
        let fan_in = (cin * kernel * kernel / (stride * stride)).max(1);
        let w = ps.insert(format!("{name}.weight"), init_weight(&[cin, cout, kernel, kernel], fan_in, rng));
        let b = ps.insert(format!("{name}.bias"), Tensor::zeros(&[cout]));
        Self { w, b, stride, pad }
    }

    pub fn forward<S: Scalar>(&self, g: &mut Graph<S>, p: &Bound, x: Var) -> Result<Var> {
        let y = g.conv_transpose2d(x, p.var(self.w), self.stride, self.pad)?;
        g.bias_channels(y, p.var(self.b))
    }
}

/// Negative slope used by every leaky activation in the model zoo.
pub const LEAKY_SLOPE: f64 = 0.2;

pub fn lrelu<S: Scalar>(g: &mut Graph<S>, x: Var) -> Var {
    g.leaky_relu(x, S::lit(LEAKY_SLOPE))
}
