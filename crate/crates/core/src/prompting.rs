//! Probing via prompting: patterns, verbalizer tokens, prefix training and
//! classification by next-token probability.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::container::TensorFile;
use crate::data::tokenizer::{EOS, SEP};
use crate::data::{Dataset, Tokenizer};
use crate::error::{Error, Result};
use crate::lm::{forward_graph, trace, BoundModel, Gates, HeadMask, Logits, ModelParams, PrefixParams};
use crate::optim::{mean_loss_and_grads, Adam, AdamConfig};
use crate::tensor::{argmax, Scalar, Tensor};

/// Variance of freshly minted symbol rows.
pub const NEW_SYMBOL_VARIANCE: f64 = 0.02;

/// `x SEP s1 [SEP s2] EOS` as token ids.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Pattern {
    pub tokens: Vec<usize>,
    pub sep: usize,
    pub eos: usize,
}

impl Pattern {
    pub fn build(x: &[usize], s1: &[usize], s2: Option<&[usize]>, sep: usize, eos: usize) -> Result<Self> {
        if s1.is_empty() || s2.is_some_and(<[usize]>::is_empty) {
            return Err(Error::Span("pattern spans must be non-empty".into()));
        }
        let mut tokens = Vec::with_capacity(x.len() + s1.len() + s2.map_or(0, <[usize]>::len) + 3);
        tokens.extend_from_slice(x);
        tokens.push(sep);
        tokens.extend_from_slice(s1);
        if let Some(s2) = s2 {
            tokens.push(sep);
            tokens.extend_from_slice(s2);
        }
        tokens.push(eos);
        Ok(Self { tokens, sep, eos })
    }

    /// Index of the final token (the EOS whose successor is predicted).
    pub fn final_position(&self) -> usize {
        self.tokens.len() - 1
    }

    /// Splits back into `(x, s1, s2)`.
    pub fn decode(&self) -> Result<(Vec<usize>, Vec<usize>, Option<Vec<usize>>)> {
        let Some((&last, body)) = self.tokens.split_last() else {
            return Err(Error::Span("empty pattern".into()));
        };
        if last != self.eos {
            return Err(Error::Span("pattern does not end with EOS".into()));
        }
        let mut parts = body.split(|&t| t == self.sep);
        let x = parts.next().unwrap_or_default().to_vec();
        let s1 = parts
            .next()
            .ok_or_else(|| Error::Span("pattern has no separator".into()))?
            .to_vec();
        let s2 = parts.next().map(<[usize]>::to_vec);
        if parts.next().is_some() {
            return Err(Error::Span("pattern has more than two separators".into()));
        }
        Ok((x, s1, s2))
    }
}

/// Label → distinguished token, plus the separator and terminator ids.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Verbalizer {
    pub labels: Vec<String>,
    pub cls: Vec<usize>,
    pub sep: usize,
    pub eos: usize,
}

impl Verbalizer {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn label_index(&self, label: &str) -> Result<usize> {
        self.labels
            .iter()
            .position(|l| l == label)
            .ok_or_else(|| Error::UnknownLabel(label.to_string()))
    }
}

/// Symbol used for a minted label token.
pub fn cls_symbol(label: &str) -> String {
    format!("<cls:{label}>")
}

/// Grows the vocabulary by one frozen symbol per label, plus SEP and EOS
/// when the tokenizer lacks them. New embedding and output rows are drawn
/// from `normal(0, 0.02)` (variance) and never trained. The tokenizer learns
/// the same symbols so ids stay aligned.
pub fn extend_vocabulary<F: Scalar>(
    model: &ModelParams<F>,
    tokenizer: &mut Tokenizer,
    labels: &[String],
    seed: u64,
) -> Result<(ModelParams<F>, Verbalizer)> {
    if labels.is_empty() {
        return Err(Error::Empty("label set"));
    }
    for (i, l) in labels.iter().enumerate() {
        if labels[..i].contains(l) {
            return Err(Error::DuplicateLabel(l.clone()));
        }
    }
    let old = model.config.vocab_size;
    if tokenizer.len() != old {
        return Err(Error::Config(format!(
            "tokenizer has {} symbols but the model vocabulary is {old}",
            tokenizer.len()
        )));
    }
    let sep = match tokenizer.special(SEP) {
        Some(id) => id,
        None => tokenizer.add_special(SEP, "<sep>"),
    };
    let eos = match tokenizer.special(EOS) {
        Some(id) => id,
        None => tokenizer.add_special(EOS, "<eos>"),
    };
    let cls: Vec<usize> = labels
        .iter()
        .map(|l| tokenizer.add_special(&format!("cls:{l}"), &cls_symbol(l)))
        .collect();
    let added = tokenizer.len() - old;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, NEW_SYMBOL_VARIANCE.sqrt()).expect("valid std");
    let d = model.config.d_model;
    let mut draw = |n: usize| -> Tensor<F> {
        Tensor::from_vec(n, d, (0..n * d).map(|_| F::of(normal.sample(&mut rng))).collect())
    };
    let new_emb = draw(added);
    let new_out = draw(added);
    let mut extended = model.clone();
    extended.config.vocab_size = old + added;
    extended.token_embeddings = model.token_embeddings.vstack(&new_emb);
    extended.output = model.output.vstack(&new_out);
    extended.frozen_rows.extend(old..old + added);
    Ok((
        extended,
        Verbalizer {
            labels: labels.to_vec(),
            cls,
            sep,
            eos,
        },
    ))
}

/// A pattern and the index of its gold label.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptExample {
    pub pattern: Pattern,
    pub target: usize,
}

/// Patterns for every example in `dataset`.
pub fn prompt_examples(dataset: &Dataset, verbalizer: &Verbalizer) -> Result<Vec<PromptExample>> {
    dataset
        .examples
        .iter()
        .map(|e| {
            Ok(PromptExample {
                pattern: Pattern::build(&e.tokens, e.span1_tokens(), e.span2_tokens(), verbalizer.sep, verbalizer.eos)?,
                target: verbalizer.label_index(&e.label)?,
            })
        })
        .collect()
}

/// Next-token logits of the label symbols after `pattern`.
pub fn cls_logits<F: Scalar>(
    model: &ModelParams<F>,
    prefix: Option<&PrefixParams<F>>,
    pattern: &Pattern,
    verbalizer: &Verbalizer,
    mask: Option<&HeadMask>,
) -> Result<Vec<F>> {
    let tr = trace(model, &pattern.tokens, prefix, mask)?;
    Ok(verbalizer.cls.iter().map(|&id| tr.final_logits[id]).collect())
}

/// Label whose symbol is the most probable next token; ties go to the
/// lowest label index.
pub fn classify<F: Scalar>(
    model: &ModelParams<F>,
    prefix: Option<&PrefixParams<F>>,
    pattern: &Pattern,
    verbalizer: &Verbalizer,
    mask: Option<&HeadMask>,
) -> Result<usize> {
    if pattern.tokens.last() != Some(&verbalizer.eos) {
        return Err(Error::Span("pattern does not end with EOS".into()));
    }
    Ok(argmax(&cls_logits(model, prefix, pattern, verbalizer, mask)?))
}

/// Predictions for many patterns, evaluated in parallel.
pub fn predict_all<F: Scalar>(
    model: &ModelParams<F>,
    prefix: Option<&PrefixParams<F>>,
    examples: &[PromptExample],
    verbalizer: &Verbalizer,
    mask: Option<&HeadMask>,
) -> Result<Vec<usize>> {
    examples
        .par_iter()
        .map(|e| classify(model, prefix, &e.pattern, verbalizer, mask))
        .collect()
}

/// Percentage of correct predictions.
pub fn accuracy<F: Scalar>(
    model: &ModelParams<F>,
    prefix: Option<&PrefixParams<F>>,
    examples: &[PromptExample],
    verbalizer: &Verbalizer,
    mask: Option<&HeadMask>,
) -> Result<f64> {
    if examples.is_empty() {
        return Err(Error::Empty("evaluation set"));
    }
    let preds = predict_all(model, prefix, examples, verbalizer, mask)?;
    let correct = preds.iter().zip(examples).filter(|(p, e)| **p == e.target).count();
    Ok(100.0 * correct as f64 / examples.len() as f64)
}

/// Which next-token distribution the training loss normalizes over.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossScope {
    /// Softmax over the whole vocabulary.
    #[default]
    Vocabulary,
    /// Softmax over the label symbols only.
    Labels,
}

/// Cross-entropy of label `target` given the final-position `logits` node.
pub fn verbalizer_loss<F: Scalar>(
    g: &mut Graph<'_, F>,
    logits: Var,
    verbalizer: &Verbalizer,
    target: usize,
    scope: LossScope,
) -> Var {
    match scope {
        LossScope::Vocabulary => g.cross_entropy(logits, &[verbalizer.cls[target]]),
        LossScope::Labels => {
            let col = g.transpose(logits);
            let rows = g.gather(col, &verbalizer.cls);
            let row = g.transpose(rows);
            g.cross_entropy(row, &[target])
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PrefixTrainConfig {
    pub prefix_len: usize,
    pub optimizer: AdamConfig,
    pub batch_size: usize,
    pub epochs: usize,
    pub init_std: f64,
    pub loss: LossScope,
}

impl Default for PrefixTrainConfig {
    fn default() -> Self {
        Self {
            prefix_len: 200,
            optimizer: AdamConfig::with_lr(1e-4),
            batch_size: 16,
            epochs: 1,
            init_std: 0.02,
            loss: LossScope::Vocabulary,
        }
    }
}

impl PrefixTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::Config("batch_size and epochs must be positive".into()));
        }
        if !(self.optimizer.lr > 0.0) {
            return Err(Error::Config("learning rate must be positive".into()));
        }
        Ok(())
    }
}

/// Cross-entropy of the gold label symbol after the pattern, with gradients
/// for every prefix tensor (in [`PrefixParams::tensors`] order).
pub fn prefix_loss_and_grads<F: Scalar>(
    model: &ModelParams<F>,
    prefix: &PrefixParams<F>,
    example: &PromptExample,
    verbalizer: &Verbalizer,
    mask: Option<&HeadMask>,
    scope: LossScope,
) -> Result<(F, Vec<Tensor<F>>)> {
    let mut g = Graph::new();
    let bound_model = BoundModel::bind(&mut g, model, false);
    let bound_prefix = prefix.bind(&mut g, true);
    let out = forward_graph(
        &mut g,
        &model.config,
        &bound_model,
        &example.pattern.tokens,
        Some(&bound_prefix),
        mask.map(Gates::Fixed),
        Logits::Last,
    )?;
    let logits = out.logits.expect("last logits requested");
    let loss = verbalizer_loss(&mut g, logits, verbalizer, example.target, scope);
    let mut grads = g.backward(loss);
    let out = bound_prefix
        .vars()
        .into_iter()
        .zip(prefix.tensors())
        .map(|(v, t)| grads.take_or_zeros(v, t))
        .collect();
    Ok((g.scalar_value(loss), out))
}

/// Per-batch mean losses recorded while training.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainLog {
    pub batch_losses: Vec<f64>,
}

/// Learns a prefix of `config.prefix_len` slots with the model frozen.
/// With a `mask`, only the gated-on heads take part.
pub fn train_prefix<F: Scalar>(
    model: &ModelParams<F>,
    examples: &[PromptExample],
    verbalizer: &Verbalizer,
    config: &PrefixTrainConfig,
    mask: Option<&HeadMask>,
    seed: u64,
) -> Result<(PrefixParams<F>, TrainLog)> {
    config.validate()?;
    if examples.is_empty() {
        return Err(Error::Empty("training set"));
    }
    if let Some(e) = examples.iter().find(|e| e.target >= verbalizer.len()) {
        return Err(Error::UnknownLabel(format!("label index {}", e.target)));
    }
    let mut prefix = PrefixParams::init(&model.config, config.prefix_len, config.init_std, seed);
    let mut adam = Adam::new(config.optimizer, prefix.tensors());
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let mut log = TrainLog::default();
    for _ in 0..config.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(config.batch_size) {
            let current = &prefix;
            let (loss, grads) = mean_loss_and_grads(batch, |&i| {
                prefix_loss_and_grads(model, current, &examples[i], verbalizer, mask, config.loss)
            })?;
            adam.step(&mut prefix.tensors_mut(), &grads);
            log.batch_losses.push(loss.as_f64());
        }
    }
    prefix.validate(&model.config)?;
    Ok((prefix, log))
}

/// Stores a prefix with its length and task in the header metadata.
pub fn save_prefix<F: Scalar>(prefix: &PrefixParams<F>, task: &str, path: &Path) -> Result<()> {
    let mut file = TensorFile::new(None);
    file.metadata.insert("kind".into(), "prefix".into());
    file.metadata.insert("prefix_len".into(), prefix.prefix_len.into());
    file.metadata.insert("task".into(), task.into());
    for (name, t) in prefix.named_tensors() {
        file.push(name, t.clone());
    }
    file.write(path, F::DTYPE)
}

/// Reads a prefix written by [`save_prefix`], returning it with its task.
pub fn load_prefix<F: Scalar>(path: &Path) -> Result<(PrefixParams<F>, String)> {
    let file = TensorFile::<F>::read(path)?;
    let len = file
        .metadata_u64("prefix_len")
        .ok_or_else(|| Error::Header("prefix file lacks prefix_len".into()))? as usize;
    let task = file.metadata_str("task").unwrap_or_default().to_string();
    Ok((PrefixParams::from_named_tensors(len, file.tensors)?, task))
}
