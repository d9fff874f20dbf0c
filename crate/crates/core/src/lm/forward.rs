use super::mask::HeadMask;
use super::params::{BoundLayer, BoundModel};
use super::prefix::BoundPrefix;
use super::TransformerConfig;
use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Head gates fed to a forward pass.
#[derive(Debug, Clone, Copy)]
pub enum Gates<'m> {
    /// Constant gates; a zero gate skips the head entirely.
    Fixed(&'m HeadMask),
    /// An `L × H` graph node, differentiable.
    Node(Var),
}

/// Which positions get vocabulary logits.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Logits {
    None,
    Last,
    All,
}

/// Graph handles produced by [`forward_graph`].
#[derive(Debug, Clone)]
pub struct GraphTrace {
    /// `A^(0) .. A^(L)`, each `n × d_model`.
    pub layers: Vec<Var>,
    pub logits: Option<Var>,
}

/// Per-head internals of one attention sublayer.
#[derive(Debug, Clone)]
pub struct HeadDetail {
    pub probs: Var,
    pub values: Var,
    pub output: Var,
}

pub(crate) fn check_tokens(config: &TransformerConfig, tokens: &[usize]) -> Result<()> {
    if tokens.is_empty() {
        return Err(Error::SequenceTooShort { len: 0, min: 1 });
    }
    if tokens.len() > config.max_positions {
        return Err(Error::SequenceTooLong {
            len: tokens.len(),
            max: config.max_positions,
        });
    }
    if let Some(&id) = tokens.iter().find(|&&t| t >= config.vocab_size) {
        return Err(Error::OutOfVocabulary {
            id,
            vocab_size: config.vocab_size,
        });
    }
    Ok(())
}

fn check_extras<F: Scalar>(
    g: &Graph<'_, F>,
    config: &TransformerConfig,
    prefix: Option<&BoundPrefix>,
    gates: Option<Gates<'_>>,
) -> Result<()> {
    if let Some(p) = prefix {
        if p.keys.len() != config.n_layers || p.values.len() != config.n_layers {
            return Err(Error::Shape(format!(
                "prefix has {} layers, model has {}",
                p.keys.len(),
                config.n_layers
            )));
        }
    }
    match gates {
        Some(Gates::Fixed(mask)) => mask.check_shape(config.n_layers, config.n_heads)?,
        Some(Gates::Node(v)) => {
            let shape = g.value(v).shape();
            if shape != (config.n_layers, config.n_heads) {
                return Err(Error::Shape(format!(
                    "gate node is {}x{}, model has {}x{} heads",
                    shape.0, shape.1, config.n_layers, config.n_heads
                )));
            }
        }
        None => {}
    }
    Ok(())
}

fn linear<F: Scalar>(g: &mut Graph<'_, F>, x: Var, (w, b): (Var, Var)) -> Var {
    let y = g.matmul(x, w);
    g.add_row(y, b)
}

/// Multi-head causal attention over already-normalized `inputs` of one block.
///
/// Prefix key/value rows sit in front of the projected keys and values; row
/// `i` of the scores sees the whole prefix and real positions `0..=i`.
pub fn attention_sublayer<F: Scalar>(
    g: &mut Graph<'_, F>,
    config: &TransformerConfig,
    layer_index: usize,
    layer: &BoundLayer,
    inputs: Var,
    prefix: Option<&BoundPrefix>,
    gates: Option<Gates<'_>>,
    mut details: Option<&mut Vec<HeadDetail>>,
) -> Var {
    let n = g.value(inputs).rows();
    let d = config.d_head;
    let q = linear(g, inputs, layer.q);
    let mut k = linear(g, inputs, layer.k);
    let mut v = linear(g, inputs, layer.v);
    let offset = match prefix {
        Some(p) if p.prefix_len > 0 => {
            k = g.concat_rows(&[p.keys[layer_index], k]);
            v = g.concat_rows(&[p.values[layer_index], v]);
            p.prefix_len
        }
        _ => 0,
    };
    let inv_sqrt_d = F::one() / F::of(d as f64).sqrt();
    let mut heads = Vec::with_capacity(config.n_heads);
    for h in 0..config.n_heads {
        let fixed_gate = match gates {
            Some(Gates::Fixed(mask)) => Some(mask.get(layer_index, h)),
            _ => None,
        };
        if fixed_gate == Some(0.0) && details.is_none() {
            heads.push(g.constant(Tensor::zeros(n, d)));
            continue;
        }
        let qh = g.slice_cols(q, h * d, d);
        let kh = g.slice_cols(k, h * d, d);
        let vh = g.slice_cols(v, h * d, d);
        let scores = g.matmul_t(qh, kh);
        let scores = g.scale(scores, inv_sqrt_d);
        let probs = g.causal_softmax(scores, offset);
        let z = g.matmul(probs, vh);
        let gated = match (gates, fixed_gate) {
            (_, Some(gate)) if gate == 1.0 => z,
            (_, Some(gate)) => g.scale(z, F::of(gate)),
            (Some(Gates::Node(node)), None) => {
                let gate = g.element(node, layer_index, h);
                g.mul_scalar(z, gate)
            }
            _ => z,
        };
        if let Some(out) = details.as_deref_mut() {
            out.push(HeadDetail {
                probs,
                values: vh,
                output: gated,
            });
        }
        heads.push(gated);
    }
    let merged = g.concat_cols(&heads);
    linear(g, merged, layer.o)
}

/// Pre-norm GPT-2 style forward pass recorded on `g`.
///
/// Block: `h += attn(LN1(h))`, `h += W2·gelu(W1·LN2(h))`. Logits are
/// `LN_f(a^(L)) · outputᵀ`. The prefix never touches `A^(0)`.
pub fn forward_graph<F: Scalar>(
    g: &mut Graph<'_, F>,
    config: &TransformerConfig,
    model: &BoundModel,
    tokens: &[usize],
    prefix: Option<&BoundPrefix>,
    gates: Option<Gates<'_>>,
    logits: Logits,
) -> Result<GraphTrace> {
    check_tokens(config, tokens)?;
    check_extras(g, config, prefix, gates)?;
    let n = tokens.len();
    let positions: Vec<usize> = (0..n).collect();
    let tok = g.gather(model.token_embeddings, tokens);
    let pos = g.gather(model.position_embeddings, &positions);
    let mut h = g.add(tok, pos);
    let mut layers = Vec::with_capacity(config.n_layers + 1);
    layers.push(h);
    for (l, layer) in model.layers.iter().enumerate() {
        let x = g.layer_norm(h, layer.ln1.0, layer.ln1.1);
        let attn = attention_sublayer(g, config, l, layer, x, prefix, gates, None);
        h = g.add(h, attn);
        let x = g.layer_norm(h, layer.ln2.0, layer.ln2.1);
        let hidden = linear(g, x, layer.ff_in);
        let hidden = g.gelu(hidden);
        let ff = linear(g, hidden, layer.ff_out);
        h = g.add(h, ff);
        layers.push(h);
    }
    let logits = match logits {
        Logits::None => None,
        Logits::Last => {
            let last = g.slice_rows(h, n - 1, 1);
            Some(readout(g, model, last))
        }
        Logits::All => Some(readout(g, model, h)),
    };
    Ok(GraphTrace { layers, logits })
}

/// `LN_f(a) · outputᵀ`.
pub fn readout<F: Scalar>(g: &mut Graph<'_, F>, model: &BoundModel, a: Var) -> Var {
    let x = g.layer_norm(a, model.final_ln.0, model.final_ln.1);
    g.matmul_t(x, model.output)
}
