//! Minimal reverse-mode automatic differentiation over dense tensors.
//!
//! Only the layer vocabulary the transcription networks need is provided:
//! valid-padding convolutions, dense layers, max pooling, ELU/sigmoid,
//! a straight-through ReLU, noise injection, linear mixing for cross-stitch
//! units, and the two loss kernels. Everything is generic over [`Element`]
//! so the same code runs in `f32` for training and `f64` for gradient
//! checks.

mod checkpoint;
mod graph;
mod tensor;

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal, Uniform};
use rand_xoshiro::Xoshiro256PlusPlus;
use thiserror::Error;

pub use checkpoint::{read_checkpoint, write_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use graph::{ConvGeometry, Gradients, Graph, Var};
pub use tensor::{Element, Tensor};

/// Random generator used for every stochastic draw in a run.
pub type RunRng = ChaCha8Rng;

/// Independent seed for sub-stream `stream` of `seed` (splitmix64
/// finaliser).
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ 0x9E37_79B9_7F4A_7C15u64.wrapping_mul(stream);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Debug, Error)]
pub enum AutodiffError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NoiseMode {
    Multiplicative,
    Additive,
}

/// Gaussian noise injection. In training, multiplicative noise computes
/// `x·(1+ε)` and additive noise `x+ε` with `ε ~ N(0, σ²)`; otherwise, or
/// when `sigma == 0`, `x` is returned unchanged. The noise is a constant
/// with respect to backward.
pub fn gaussian_noise<T: Element>(
    graph: &mut Graph<T>,
    x: Var,
    mode: NoiseMode,
    sigma: f64,
    training: bool,
    rng: &mut RunRng,
) -> Result<Var, AutodiffError> {
    if !training || sigma == 0.0 {
        return Ok(x);
    }
    let n = graph.value(x).numel();
    match mode {
        NoiseMode::Multiplicative => graph.mul_const(x, noise_factors(n, sigma, T::one(), rng)),
        NoiseMode::Additive => graph.add_const(x, &noise_factors(n, sigma, T::zero(), rng)),
    }
}

/// ELU followed by multiplicative then additive noise, as a single node.
/// Draws the same noise as `elu` + two [`gaussian_noise`] calls.
pub fn elu_with_noise<T: Element>(
    graph: &mut Graph<T>,
    x: Var,
    sigma: f64,
    rng: &mut RunRng,
) -> Result<Var, AutodiffError> {
    if sigma == 0.0 {
        return Ok(graph.elu(x));
    }
    let n = graph.value(x).numel();
    let scale = noise_factors(n, sigma, T::one(), rng);
    let shift = noise_factors(n, sigma, T::zero(), rng);
    graph.elu_scale_shift(x, scale, &shift)
}

/// `center + σ·ε` for `n` standard normal draws from a stream seeded off
/// `rng`.
fn noise_factors<T: Element>(n: usize, sigma: f64, center: T, rng: &mut RunRng) -> Vec<T> {
    let mut stream = Xoshiro256PlusPlus::seed_from_u64(rng.gen());
    (0..n)
        .map(|_| {
            let e: f64 = StandardNormal.sample(&mut stream);
            center + T::from_f64_lossy(sigma * e)
        })
        .collect()
}

/// Half-width of the Glorot uniform interval.
pub fn glorot_bound(fan_in: usize, fan_out: usize) -> f64 {
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}

/// `count` i.i.d. draws from `U[-a, a]`, `a = sqrt(6 / (fan_in + fan_out))`.
pub fn glorot_uniform<T: Element>(
    fan_in: usize,
    fan_out: usize,
    count: usize,
    rng: &mut impl Rng,
) -> Vec<T> {
    assert!(fan_in >= 1 && fan_out >= 1, "fans must be positive");
    let a = glorot_bound(fan_in, fan_out);
    let dist = Uniform::new_inclusive(-a, a);
    (0..count)
        .map(|_| T::from_f64_lossy(dist.sample(rng)))
        .collect()
}

/// Named parameter tensors, iterated in lexicographic name order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<T> {
    params: BTreeMap<String, Tensor<T>>,
}

impl<T: Element> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            params: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>) {
        self.params.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.params.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<T>)> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor<T>)> {
        self.params.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.params.keys()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total scalar count over all tensors.
    pub fn num_scalars(&self) -> usize {
        self.params.values().map(Tensor::numel).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.params.values().all(Tensor::is_finite)
    }

    pub fn cast<U: Element>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|(k, v)| (k.clone(), v.cast()))
                .collect(),
        }
    }

    /// Record every parameter as a trainable leaf of `graph`.
    pub fn bind(&self, graph: &mut Graph<T>) -> BoundParams {
        BoundParams {
            vars: self
                .params
                .iter()
                .map(|(k, v)| (k.clone(), graph.parameter(v.clone())))
                .collect(),
        }
    }
}

/// Graph handles of a bound [`ParamStore`].
#[derive(Clone, Debug)]
pub struct BoundParams {
    vars: BTreeMap<String, Var>,
}

impl BoundParams {
    /// Panics if `name` was not bound; parameter names are fixed at model
    /// construction.
    pub fn var(&self, name: &str) -> Var {
        match self.vars.get(name) {
            Some(v) => *v,
            None => panic!("parameter {name} is not bound"),
        }
    }

    /// Gradients of every bound parameter (zeros where none flowed).
    pub fn gradients<T: Element>(&self, graph: &Graph<T>, grads: &Gradients<T>) -> ParamStore<T> {
        ParamStore {
            params: self
                .vars
                .iter()
                .map(|(k, &v)| (k.clone(), grads.get_or_zeros(v, graph)))
                .collect(),
        }
    }
}
