use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::TransformerConfig;
use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Learned key/value pairs for `T` virtual positions in front of the input.
///
/// Per layer, `keys[l]` and `values[l]` are `T × d_model`; columns
/// `[h·d, (h+1)·d)` belong to head `h`, so the full shape is
/// `L × H × T × 2 × d`.
#[derive(Clone, Debug, PartialEq)]
pub struct PrefixParams<F> {
    pub prefix_len: usize,
    pub keys: Vec<Tensor<F>>,
    pub values: Vec<Tensor<F>>,
}

impl<F: Scalar> PrefixParams<F> {
    /// `normal(0, std)` entries, deterministic in `seed`.
    pub fn init(config: &TransformerConfig, prefix_len: usize, std: f64, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.d_model;
        let mut keys = Vec::with_capacity(config.n_layers);
        let mut values = Vec::with_capacity(config.n_layers);
        for _ in 0..config.n_layers {
            keys.push(Tensor::randn(prefix_len, d, std, &mut rng));
            values.push(Tensor::randn(prefix_len, d, std, &mut rng));
        }
        Self {
            prefix_len,
            keys,
            values,
        }
    }

    /// A prefix of length zero.
    pub fn empty(config: &TransformerConfig) -> Self {
        Self::init(config, 0, 0.0, 0)
    }

    pub fn n_layers(&self) -> usize {
        self.keys.len()
    }

    pub fn validate(&self, config: &TransformerConfig) -> Result<()> {
        if self.keys.len() != config.n_layers || self.values.len() != config.n_layers {
            return Err(Error::Shape(format!(
                "prefix has {} layers, model has {}",
                self.keys.len(),
                config.n_layers
            )));
        }
        for t in self.keys.iter().chain(&self.values) {
            if t.shape() != (self.prefix_len, config.d_model) {
                return Err(Error::Shape(format!(
                    "prefix tensor is {}x{}, expected {}x{}",
                    t.rows(),
                    t.cols(),
                    self.prefix_len,
                    config.d_model
                )));
            }
            if !t.is_finite() {
                return Err(Error::Invariant("prefix holds NaN or Inf".into()));
            }
        }
        Ok(())
    }

    /// Key vector of head `head` at virtual position `pos` in layer `layer`.
    pub fn key(&self, layer: usize, head: usize, pos: usize, d_head: usize) -> &[F] {
        &self.keys[layer].row(pos)[head * d_head..(head + 1) * d_head]
    }

    pub fn value(&self, layer: usize, head: usize, pos: usize, d_head: usize) -> &[F] {
        &self.values[layer].row(pos)[head * d_head..(head + 1) * d_head]
    }

    pub fn tensors(&self) -> Vec<&Tensor<F>> {
        self.keys
            .iter()
            .zip(&self.values)
            .flat_map(|(k, v)| [k, v])
            .collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor<F>> {
        self.keys
            .iter_mut()
            .zip(self.values.iter_mut())
            .flat_map(|(k, v)| [k, v])
            .collect()
    }

    pub fn named_tensors(&self) -> Vec<(String, &Tensor<F>)> {
        self.keys
            .iter()
            .zip(&self.values)
            .enumerate()
            .flat_map(|(l, (k, v))| [(format!("prefix.{l}.key"), k), (format!("prefix.{l}.value"), v)])
            .collect()
    }

    pub fn from_named_tensors(prefix_len: usize, tensors: Vec<(String, Tensor<F>)>) -> Result<Self> {
        if !tensors.len().is_multiple_of(2) {
            return Err(Error::Shape("prefix tensors come in key/value pairs".into()));
        }
        let mut keys = Vec::new();
        let mut values = Vec::new();
        for (i, (name, t)) in tensors.into_iter().enumerate() {
            let layer = i / 2;
            let expected = if i % 2 == 0 {
                format!("prefix.{layer}.key")
            } else {
                format!("prefix.{layer}.value")
            };
            if name != expected {
                return Err(Error::Shape(format!("expected tensor {expected}, found {name}")));
            }
            if t.rows() != prefix_len {
                return Err(Error::Shape(format!(
                    "{name} has {} rows, prefix length is {prefix_len}",
                    t.rows()
                )));
            }
            if i % 2 == 0 {
                keys.push(t);
            } else {
                values.push(t);
            }
        }
        Ok(Self {
            prefix_len,
            keys,
            values,
        })
    }

    pub fn bind<'a>(&'a self, g: &mut Graph<'a, F>, trainable: bool) -> BoundPrefix {
        BoundPrefix {
            prefix_len: self.prefix_len,
            keys: self.keys.iter().map(|t| g.leaf_ref(t, trainable)).collect(),
            values: self.values.iter().map(|t| g.leaf_ref(t, trainable)).collect(),
        }
    }
}

/// Graph handles for a [`PrefixParams`].
#[derive(Debug, Clone)]
pub struct BoundPrefix {
    pub prefix_len: usize,
    pub keys: Vec<Var>,
    pub values: Vec<Var>,
}

impl BoundPrefix {
    /// Handles in the order of [`PrefixParams::tensors`].
    pub fn vars(&self) -> Vec<Var> {
        self.keys
            .iter()
            .zip(&self.values)
            .flat_map(|(&k, &v)| [k, v])
            .collect()
    }
}
