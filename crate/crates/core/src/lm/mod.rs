//! Decoder-only causal transformer: configuration, weights, forward pass,
//! activation capture, head masking, prefix injection and weight files.

mod forward;
mod mask;
mod params;
mod prefix;
mod train;

use std::collections::BTreeSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

pub use forward::{attention_sublayer, forward_graph, readout, Gates, GraphTrace, HeadDetail, Logits};
pub use mask::{HeadMask, MaskMode};
pub use params::{BoundLayer, BoundModel, LayerParams, ModelParams, INIT_STD};
pub use prefix::{BoundPrefix, PrefixParams};
pub use train::{lm_windows, pretrain, PretrainConfig, PretrainReport};

use crate::autograd::Graph;
use crate::container::TensorFile;
use crate::error::{Error, Result};
use crate::tensor::{DType, Scalar, Tensor};

/// Architecture hyper-parameters.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TransformerConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub d_head: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub max_positions: usize,
    /// 32 or 64.
    pub float_width: u32,
}

impl TransformerConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("d_model", self.d_model),
            ("d_head", self.d_head),
            ("d_ff", self.d_ff),
            ("vocab_size", self.vocab_size),
            ("max_positions", self.max_positions),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if self.n_heads * self.d_head != self.d_model {
            return Err(Error::Config(format!(
                "n_heads * d_head = {} but d_model = {}",
                self.n_heads * self.d_head,
                self.d_model
            )));
        }
        if self.float_width != 32 && self.float_width != 64 {
            return Err(Error::Config(format!(
                "float_width must be 32 or 64, got {}",
                self.float_width
            )));
        }
        Ok(())
    }

    pub fn total_heads(&self) -> usize {
        self.n_layers * self.n_heads
    }

    pub fn dtype(&self) -> DType {
        if self.float_width == 64 {
            DType::F64
        } else {
            DType::F32
        }
    }
}

/// Activations `A^(0)..A^(L)` and the next-token logits at the last position.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationTrace<F> {
    pub layers: Vec<Tensor<F>>,
    pub final_logits: Vec<F>,
}

impl<F: Scalar> ActivationTrace<F> {
    pub fn n_layers(&self) -> usize {
        self.layers.len().saturating_sub(1)
    }

    pub fn seq_len(&self) -> usize {
        self.layers.first().map_or(0, Tensor::rows)
    }
}

/// Runs the model without recording gradients.
pub fn trace<F: Scalar>(
    params: &ModelParams<F>,
    tokens: &[usize],
    prefix: Option<&PrefixParams<F>>,
    mask: Option<&HeadMask>,
) -> Result<ActivationTrace<F>> {
    if let Some(p) = prefix {
        p.validate(&params.config)?;
    }
    let mut g = Graph::new();
    let model = BoundModel::bind(&mut g, params, false);
    let bound_prefix = prefix.map(|p| p.bind(&mut g, false));
    let out = forward_graph(
        &mut g,
        &params.config,
        &model,
        tokens,
        bound_prefix.as_ref(),
        mask.map(Gates::Fixed),
        Logits::Last,
    )?;
    let layers = out.layers.iter().map(|&v| g.value(v).clone()).collect();
    let logits = out.logits.expect("last-position logits requested");
    Ok(ActivationTrace {
        layers,
        final_logits: g.value(logits).data().to_vec(),
    })
}

/// Per-head attention weights, value vectors and gated outputs of one layer.
#[derive(Debug, Clone)]
pub struct AttentionHeads<F> {
    /// `n × (T + n)` rows of attention weights.
    pub probs: Vec<Tensor<F>>,
    /// `(T + n) × d` value vectors (prefix rows first).
    pub values: Vec<Tensor<F>>,
    /// `n × d` gated head outputs.
    pub outputs: Vec<Tensor<F>>,
    /// `n × d_model` sublayer output after `W_o`.
    pub output: Tensor<F>,
}

/// Attention sublayer of block `layer` applied to `layer_inputs`.
///
/// The inputs are taken as already normalized (the block applies `LN1`
/// before calling this).
pub fn causal_attention<F: Scalar>(
    params: &ModelParams<F>,
    layer_inputs: &Tensor<F>,
    layer: usize,
    prefix: Option<&PrefixParams<F>>,
    mask: Option<&HeadMask>,
) -> Result<AttentionHeads<F>> {
    let config = &params.config;
    if layer >= config.n_layers {
        return Err(Error::Shape(format!(
            "layer {layer} outside 0..{}",
            config.n_layers
        )));
    }
    if layer_inputs.cols() != config.d_model {
        return Err(Error::Shape(format!(
            "inputs have width {}, d_model is {}",
            layer_inputs.cols(),
            config.d_model
        )));
    }
    if let Some(p) = prefix {
        p.validate(config)?;
    }
    if let Some(m) = mask {
        m.check_shape(config.n_layers, config.n_heads)?;
    }
    let mut g = Graph::new();
    let model = BoundModel::bind(&mut g, params, false);
    let bound_prefix = prefix.map(|p| p.bind(&mut g, false));
    let x = g.constant_ref(layer_inputs);
    let mut details = Vec::new();
    let out = attention_sublayer(
        &mut g,
        config,
        layer,
        &model.layers[layer],
        x,
        bound_prefix.as_ref(),
        mask.map(Gates::Fixed),
        Some(&mut details),
    );
    Ok(AttentionHeads {
        probs: details.iter().map(|d| g.value(d.probs).clone()).collect(),
        values: details.iter().map(|d| g.value(d.values).clone()).collect(),
        outputs: details.iter().map(|d| g.value(d.output).clone()).collect(),
        output: g.value(out).clone(),
    })
}

/// `softmax` of the trace's final-position logits.
pub fn next_token_distribution<F: Scalar>(trace: &ActivationTrace<F>) -> Vec<F> {
    crate::tensor::softmax(&trace.final_logits)
}

/// Mean over positions `1..n` of `-ln p(w_i | w_<i)`, in nats per token.
pub fn sequence_cross_entropy<F: Scalar>(
    params: &ModelParams<F>,
    tokens: &[usize],
    mask: Option<&HeadMask>,
) -> Result<F> {
    if tokens.len() < 2 {
        return Err(Error::SequenceTooShort {
            len: tokens.len(),
            min: 2,
        });
    }
    let mut g = Graph::new();
    let model = BoundModel::bind(&mut g, params, false);
    let (loss, _) = lm_loss_on_graph(&mut g, params, &model, tokens, mask.map(Gates::Fixed))?;
    Ok(g.scalar_value(loss))
}

/// Total `-ln p` over the sequence plus the number of predicted tokens.
pub fn sequence_nll<F: Scalar>(
    params: &ModelParams<F>,
    tokens: &[usize],
    mask: Option<&HeadMask>,
) -> Result<(f64, usize)> {
    let mean = sequence_cross_entropy(params, tokens, mask)?;
    let count = tokens.len() - 1;
    Ok((mean.as_f64() * count as f64, count))
}

pub(crate) fn lm_loss_on_graph<F: Scalar>(
    g: &mut Graph<'_, F>,
    params: &ModelParams<F>,
    model: &BoundModel,
    tokens: &[usize],
    gates: Option<Gates<'_>>,
) -> Result<(crate::autograd::Var, GraphTrace)> {
    let n = tokens.len();
    let out = forward_graph(
        g,
        &params.config,
        model,
        &tokens[..n - 1],
        None,
        gates,
        Logits::All,
    )?;
    let logits = out.logits.expect("all logits requested");
    let loss = g.cross_entropy(logits, &tokens[1..]);
    Ok((loss, out))
}

/// Language-model loss and gradients for every model tensor, in
/// [`ModelParams::tensors`] order. Frozen rows get zero gradient.
pub fn lm_loss_and_grads<F: Scalar>(
    params: &ModelParams<F>,
    tokens: &[usize],
    mask: Option<&HeadMask>,
) -> Result<(F, Vec<Tensor<F>>)> {
    if tokens.len() < 2 {
        return Err(Error::SequenceTooShort {
            len: tokens.len(),
            min: 2,
        });
    }
    let mut g = Graph::new();
    let model = BoundModel::bind(&mut g, params, true);
    let (loss, _) = lm_loss_on_graph(&mut g, params, &model, tokens, mask.map(Gates::Fixed))?;
    let mut grads = g.backward(loss);
    let mut out: Vec<Tensor<F>> = model
        .vars()
        .into_iter()
        .zip(params.tensors())
        .map(|(v, t)| grads.take_or_zeros(v, t))
        .collect();
    params.mask_frozen_gradients(&mut out);
    Ok((g.scalar_value(loss), out))
}

/// Writes weights in the tensor container format.
pub fn save_weights<F: Scalar>(params: &ModelParams<F>, path: impl AsRef<Path>) -> Result<()> {
    let mut file = TensorFile::new(Some(params.config.clone()));
    file.metadata.insert(
        "frozen_rows".into(),
        serde_json::to_value(&params.frozen_rows)?,
    );
    for (name, t) in params.named_tensors() {
        file.push(name, t.clone());
    }
    file.write(path, params.config.dtype())
}

/// Reads weights written by [`save_weights`] (or an external exporter).
pub fn load_weights<F: Scalar>(path: impl AsRef<Path>) -> Result<(TransformerConfig, ModelParams<F>)> {
    let file = TensorFile::<F>::read(path)?;
    let config = file
        .config
        .clone()
        .ok_or_else(|| Error::Header("weights file has no model config".into()))?;
    let frozen_rows: BTreeSet<usize> = match file.metadata.get("frozen_rows") {
        Some(v) => serde_json::from_value(v.clone())
            .map_err(|e| Error::Header(format!("frozen_rows: {e}")))?,
        None => BTreeSet::new(),
    };
    let params = ModelParams::from_named_tensors(&config, file.tensors, frozen_rows)?;
    Ok((config, params))
}
