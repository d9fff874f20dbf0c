use std::collections::BTreeSet;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::TransformerConfig;
use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Standard deviation used for every randomly initialized weight matrix.
pub const INIT_STD: f64 = 0.02;

/// Weights of one pre-norm block. Linear maps are stored `[in × out]`.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerParams<F> {
    pub ln1_gain: Tensor<F>,
    pub ln1_bias: Tensor<F>,
    pub w_q: Tensor<F>,
    pub b_q: Tensor<F>,
    pub w_k: Tensor<F>,
    pub b_k: Tensor<F>,
    pub w_v: Tensor<F>,
    pub b_v: Tensor<F>,
    pub w_o: Tensor<F>,
    pub b_o: Tensor<F>,
    pub ln2_gain: Tensor<F>,
    pub ln2_bias: Tensor<F>,
    pub w_ff_in: Tensor<F>,
    pub b_ff_in: Tensor<F>,
    pub w_ff_out: Tensor<F>,
    pub b_ff_out: Tensor<F>,
}

const LAYER_TENSORS: [&str; 16] = [
    "ln_1.weight",
    "ln_1.bias",
    "attn.q.weight",
    "attn.q.bias",
    "attn.k.weight",
    "attn.k.bias",
    "attn.v.weight",
    "attn.v.bias",
    "attn.proj.weight",
    "attn.proj.bias",
    "ln_2.weight",
    "ln_2.bias",
    "mlp.fc.weight",
    "mlp.fc.bias",
    "mlp.proj.weight",
    "mlp.proj.bias",
];

impl<F: Scalar> LayerParams<F> {
    fn random(config: &TransformerConfig, rng: &mut ChaCha8Rng) -> Self {
        let (d, ff) = (config.d_model, config.d_ff);
        Self {
            ln1_gain: Tensor::full(1, d, F::one()),
            ln1_bias: Tensor::zeros(1, d),
            w_q: Tensor::randn(d, d, INIT_STD, rng),
            b_q: Tensor::zeros(1, d),
            w_k: Tensor::randn(d, d, INIT_STD, rng),
            b_k: Tensor::zeros(1, d),
            w_v: Tensor::randn(d, d, INIT_STD, rng),
            b_v: Tensor::zeros(1, d),
            w_o: Tensor::randn(d, d, INIT_STD, rng),
            b_o: Tensor::zeros(1, d),
            ln2_gain: Tensor::full(1, d, F::one()),
            ln2_bias: Tensor::zeros(1, d),
            w_ff_in: Tensor::randn(d, ff, INIT_STD, rng),
            b_ff_in: Tensor::zeros(1, ff),
            w_ff_out: Tensor::randn(ff, d, INIT_STD, rng),
            b_ff_out: Tensor::zeros(1, d),
        }
    }

    fn expected_shapes(config: &TransformerConfig) -> [(usize, usize); 16] {
        let (d, ff) = (config.d_model, config.d_ff);
        [
            (1, d),
            (1, d),
            (d, d),
            (1, d),
            (d, d),
            (1, d),
            (d, d),
            (1, d),
            (d, d),
            (1, d),
            (1, d),
            (1, d),
            (d, ff),
            (1, ff),
            (ff, d),
            (1, d),
        ]
    }

    fn tensors(&self) -> [&Tensor<F>; 16] {
        [
            &self.ln1_gain,
            &self.ln1_bias,
            &self.w_q,
            &self.b_q,
            &self.w_k,
            &self.b_k,
            &self.w_v,
            &self.b_v,
            &self.w_o,
            &self.b_o,
            &self.ln2_gain,
            &self.ln2_bias,
            &self.w_ff_in,
            &self.b_ff_in,
            &self.w_ff_out,
            &self.b_ff_out,
        ]
    }

    fn tensors_mut(&mut self) -> [&mut Tensor<F>; 16] {
        [
            &mut self.ln1_gain,
            &mut self.ln1_bias,
            &mut self.w_q,
            &mut self.b_q,
            &mut self.w_k,
            &mut self.b_k,
            &mut self.w_v,
            &mut self.b_v,
            &mut self.w_o,
            &mut self.b_o,
            &mut self.ln2_gain,
            &mut self.ln2_bias,
            &mut self.w_ff_in,
            &mut self.b_ff_in,
            &mut self.w_ff_out,
            &mut self.b_ff_out,
        ]
    }

    fn from_tensors(mut it: impl Iterator<Item = Tensor<F>>) -> Self {
        let mut next = || it.next().expect("16 layer tensors");
        Self {
            ln1_gain: next(),
            ln1_bias: next(),
            w_q: next(),
            b_q: next(),
            w_k: next(),
            b_k: next(),
            w_v: next(),
            b_v: next(),
            w_o: next(),
            b_o: next(),
            ln2_gain: next(),
            ln2_bias: next(),
            w_ff_in: next(),
            b_ff_in: next(),
            w_ff_out: next(),
            b_ff_out: next(),
        }
    }
}

/// All weights of a decoder-only transformer.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<F> {
    pub config: TransformerConfig,
    pub token_embeddings: Tensor<F>,
    pub position_embeddings: Tensor<F>,
    pub layers: Vec<LayerParams<F>>,
    pub final_ln_gain: Tensor<F>,
    pub final_ln_bias: Tensor<F>,
    /// `[vocab_size × d_model]`; logits are `a · outputᵀ`.
    pub output: Tensor<F>,
    /// Token rows of `token_embeddings` and `output` that never change.
    pub frozen_rows: BTreeSet<usize>,
}

impl<F: Scalar> ModelParams<F> {
    /// Every weight matrix drawn from `normal(0, 0.02)`; biases zero and
    /// layer-norm gains one. Deterministic in `seed`.
    pub fn init_random(config: &TransformerConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.d_model;
        let token_embeddings = Tensor::randn(config.vocab_size, d, INIT_STD, &mut rng);
        let position_embeddings = Tensor::randn(config.max_positions, d, INIT_STD, &mut rng);
        let layers = (0..config.n_layers)
            .map(|_| LayerParams::random(config, &mut rng))
            .collect();
        let output = Tensor::randn(config.vocab_size, d, INIT_STD, &mut rng);
        Ok(Self {
            config: config.clone(),
            token_embeddings,
            position_embeddings,
            layers,
            final_ln_gain: Tensor::full(1, d, F::one()),
            final_ln_bias: Tensor::zeros(1, d),
            output,
            frozen_rows: BTreeSet::new(),
        })
    }

    /// Canonical tensor names, in storage order.
    pub fn tensor_names(config: &TransformerConfig) -> Vec<String> {
        let mut names = vec!["wte".to_string(), "wpe".to_string()];
        for l in 0..config.n_layers {
            names.extend(LAYER_TENSORS.iter().map(|n| format!("h.{l}.{n}")));
        }
        names.extend(["ln_f.weight", "ln_f.bias", "lm_head.weight"].map(String::from));
        names
    }

    fn expected_shapes(config: &TransformerConfig) -> Vec<(usize, usize)> {
        let d = config.d_model;
        let mut shapes = vec![(config.vocab_size, d), (config.max_positions, d)];
        for _ in 0..config.n_layers {
            shapes.extend(LayerParams::<F>::expected_shapes(config));
        }
        shapes.extend([(1, d), (1, d), (config.vocab_size, d)]);
        shapes
    }

    pub fn tensors(&self) -> Vec<&Tensor<F>> {
        let mut out = vec![&self.token_embeddings, &self.position_embeddings];
        for layer in &self.layers {
            out.extend(layer.tensors());
        }
        out.extend([&self.final_ln_gain, &self.final_ln_bias, &self.output]);
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor<F>> {
        let mut out = vec![&mut self.token_embeddings, &mut self.position_embeddings];
        for layer in &mut self.layers {
            out.extend(layer.tensors_mut());
        }
        out.extend([
            &mut self.final_ln_gain,
            &mut self.final_ln_bias,
            &mut self.output,
        ]);
        out
    }

    pub fn named_tensors(&self) -> Vec<(String, &Tensor<F>)> {
        Self::tensor_names(&self.config)
            .into_iter()
            .zip(self.tensors())
            .collect()
    }

    /// Rebuilds parameters from tensors in canonical order, checking shapes.
    pub fn from_named_tensors(
        config: &TransformerConfig,
        tensors: Vec<(String, Tensor<F>)>,
        frozen_rows: BTreeSet<usize>,
    ) -> Result<Self> {
        config.validate()?;
        let names = Self::tensor_names(config);
        let shapes = Self::expected_shapes(config);
        if tensors.len() != names.len() {
            return Err(Error::Shape(format!(
                "expected {} tensors for this config, found {}",
                names.len(),
                tensors.len()
            )));
        }
        let mut by_name: std::collections::HashMap<String, Tensor<F>> =
            tensors.into_iter().collect();
        let mut ordered = Vec::with_capacity(names.len());
        for (name, shape) in names.iter().zip(&shapes) {
            let t = by_name
                .remove(name)
                .ok_or_else(|| Error::Shape(format!("missing tensor {name}")))?;
            if t.shape() != *shape {
                return Err(Error::Shape(format!(
                    "{name}: expected {}x{}, found {}x{}",
                    shape.0,
                    shape.1,
                    t.rows(),
                    t.cols()
                )));
            }
            ordered.push(t);
        }
        if let Some(&row) = frozen_rows.iter().find(|&&r| r >= config.vocab_size) {
            return Err(Error::Shape(format!(
                "frozen row {row} outside vocabulary of {}",
                config.vocab_size
            )));
        }
        let mut it = ordered.into_iter();
        let token_embeddings = it.next().expect("wte");
        let position_embeddings = it.next().expect("wpe");
        let layers = (0..config.n_layers)
            .map(|_| LayerParams::from_tensors(it.by_ref().take(16)))
            .collect();
        let params = Self {
            config: config.clone(),
            token_embeddings,
            position_embeddings,
            layers,
            final_ln_gain: it.next().expect("ln_f.weight"),
            final_ln_bias: it.next().expect("ln_f.bias"),
            output: it.next().expect("lm_head.weight"),
            frozen_rows,
        };
        params.check_finite()?;
        Ok(params)
    }

    pub fn check_finite(&self) -> Result<()> {
        for (name, t) in self.named_tensors() {
            if !t.is_finite() {
                return Err(Error::Invariant(format!("{name} holds NaN or Inf")));
            }
        }
        Ok(())
    }

    pub fn num_parameters(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    /// Zeroes the frozen rows of the embedding and output gradients.
    pub fn mask_frozen_gradients(&self, grads: &mut [Tensor<F>]) {
        let last = grads.len() - 1;
        for &row in &self.frozen_rows {
            grads[0].row_mut(row).fill(F::zero());
            grads[last].row_mut(row).fill(F::zero());
        }
    }

    /// Same values at a different precision.
    pub fn cast<G: Scalar>(&self) -> ModelParams<G> {
        let tensors = self
            .named_tensors()
            .into_iter()
            .map(|(n, t)| (n, t.cast::<G>()))
            .collect();
        let mut config = self.config.clone();
        config.float_width = G::DTYPE.bits();
        ModelParams::from_named_tensors(&config, tensors, self.frozen_rows.clone())
            .expect("cast preserves shapes")
    }

    /// Order-sensitive digest of every value; equal digests mean equal bits.
    pub fn fingerprint(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut hasher = Sha256::new();
        let mut buf = Vec::new();
        for t in self.tensors() {
            buf.clear();
            for &x in t.data() {
                x.push_le(&mut buf);
            }
            hasher.update(&buf);
        }
        for r in &self.frozen_rows {
            hasher.update(r.to_le_bytes());
        }
        hasher
            .finalize()
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }
}

/// Graph handles for one block.
#[derive(Debug, Clone)]
pub struct BoundLayer {
    pub ln1: (Var, Var),
    pub q: (Var, Var),
    pub k: (Var, Var),
    pub v: (Var, Var),
    pub o: (Var, Var),
    pub ln2: (Var, Var),
    pub ff_in: (Var, Var),
    pub ff_out: (Var, Var),
}

/// Graph handles for every model tensor.
#[derive(Debug, Clone)]
pub struct BoundModel {
    pub token_embeddings: Var,
    pub position_embeddings: Var,
    pub layers: Vec<BoundLayer>,
    pub final_ln: (Var, Var),
    pub output: Var,
}

impl BoundModel {
    /// Binds `params` into `g` by reference.
    pub fn bind<'a, F: Scalar>(
        g: &mut Graph<'a, F>,
        params: &'a ModelParams<F>,
        trainable: bool,
    ) -> Self {
        let mut leaf = |t: &'a Tensor<F>| g.leaf_ref(t, trainable);
        let token_embeddings = leaf(&params.token_embeddings);
        let position_embeddings = leaf(&params.position_embeddings);
        let layers = params
            .layers
            .iter()
            .map(|l| BoundLayer {
                ln1: (leaf(&l.ln1_gain), leaf(&l.ln1_bias)),
                q: (leaf(&l.w_q), leaf(&l.b_q)),
                k: (leaf(&l.w_k), leaf(&l.b_k)),
                v: (leaf(&l.w_v), leaf(&l.b_v)),
                o: (leaf(&l.w_o), leaf(&l.b_o)),
                ln2: (leaf(&l.ln2_gain), leaf(&l.ln2_bias)),
                ff_in: (leaf(&l.w_ff_in), leaf(&l.b_ff_in)),
                ff_out: (leaf(&l.w_ff_out), leaf(&l.b_ff_out)),
            })
            .collect();
        let final_ln = (leaf(&params.final_ln_gain), leaf(&params.final_ln_bias));
        let output = leaf(&params.output);
        Self {
            token_embeddings,
            position_embeddings,
            layers,
            final_ln,
            output,
        }
    }

    /// Handles in the same order as [`ModelParams::tensors`].
    pub fn vars(&self) -> Vec<Var> {
        let mut out = vec![self.token_embeddings, self.position_embeddings];
        for l in &self.layers {
            for (w, b) in [l.ln1, l.q, l.k, l.v, l.o, l.ln2, l.ff_in, l.ff_out] {
                out.push(w);
                out.push(b);
            }
        }
        out.extend([self.final_ln.0, self.final_ln.1, self.output]);
        out
    }
}
