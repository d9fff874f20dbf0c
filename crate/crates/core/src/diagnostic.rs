//! Diagnostic probes: classifiers trained on frozen activations.
//!
//! The linear probe pools raw last-layer vectors over each span. The MLP
//! probe mixes layers `1..=L` with learned softmax weights, projects to a
//! smaller width, pools, and classifies with one ReLU hidden layer. Span
//! pooling uses a learned scoring vector per span; for span pairs the two
//! pooled vectors are concatenated in `(span1, span2)` order.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::container::TensorFile;
use crate::data::{Dataset, EdgeProbingExample, Span};
use crate::error::{Error, Result};
use crate::lm::{trace, ActivationTrace, HeadMask, ModelParams};
use crate::optim::{mean_loss_and_grads, Adam, AdamConfig};
use crate::prompting::TrainLog;
use crate::tensor::{argmax, softmax, Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProbeKind {
    Lr,
    Mlp,
}

impl ProbeKind {
    pub fn name(self) -> &'static str {
        match self {
            ProbeKind::Lr => "lr",
            ProbeKind::Mlp => "mlp",
        }
    }
}

/// Per-position convex combination of `A^(1)..A^(L)` under `weights`.
pub fn scalar_mix<F: Scalar>(trace: &ActivationTrace<F>, weights: &[F]) -> Result<Tensor<F>> {
    let l = trace.n_layers();
    if l == 0 || weights.len() != l {
        return Err(Error::Shape(format!(
            "{} mixing weights for a trace with {l} layers above the embeddings",
            weights.len()
        )));
    }
    let first = &trace.layers[1];
    let mut out = Tensor::zeros(first.rows(), first.cols());
    for (a, &w) in trace.layers[1..].iter().zip(weights) {
        for (o, &x) in out.data_mut().iter_mut().zip(a.data()) {
            *o += w * x;
        }
    }
    Ok(out)
}

/// Attention-weighted sum of the rows of `reps` inside `span`, with scores
/// `reps[i] · scorer`.
pub fn pool_span<F: Scalar>(reps: &Tensor<F>, span: Span, scorer: &[F]) -> Result<Vec<F>> {
    span.check(reps.rows())?;
    if scorer.len() != reps.cols() {
        return Err(Error::Shape(format!(
            "scoring vector has {} entries, representations have {}",
            scorer.len(),
            reps.cols()
        )));
    }
    let scores: Vec<F> = (span.start..span.end)
        .map(|i| reps.row(i).iter().zip(scorer).map(|(&a, &b)| a * b).sum())
        .collect();
    let weights = softmax(&scores);
    let mut out = vec![F::zero(); reps.cols()];
    for (i, &w) in (span.start..span.end).zip(&weights) {
        for (o, &x) in out.iter_mut().zip(reps.row(i)) {
            *o += w * x;
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbeConfig {
    pub optimizer: AdamConfig,
    pub batch_size: usize,
    pub epochs: usize,
    /// Width the MLP probe projects to before pooling.
    pub projection_dim: usize,
    pub hidden_dim: usize,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            optimizer: AdamConfig::with_lr(1e-3),
            batch_size: 16,
            epochs: 1,
            projection_dim: 256,
            hidden_dim: 512,
        }
    }
}

impl ProbeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::Config("batch_size and epochs must be positive".into()));
        }
        if self.projection_dim == 0 || self.hidden_dim == 0 {
            return Err(Error::Config("probe widths must be positive".into()));
        }
        if !(self.optimizer.lr > 0.0) {
            return Err(Error::Config("learning rate must be positive".into()));
        }
        Ok(())
    }
}

/// A dense layer `x W + b`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear<F> {
    pub weight: Tensor<F>,
    pub bias: Tensor<F>,
}

impl<F: Scalar> Linear<F> {
    fn init(fan_in: usize, fan_out: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            weight: Tensor::randn(fan_in, fan_out, 1.0 / (fan_in as f64).sqrt(), rng),
            bias: Tensor::zeros(1, fan_out),
        }
    }

    fn apply(&self, x: &[F]) -> Vec<F> {
        let w = &self.weight;
        let mut out = self.bias.data().to_vec();
        for (i, &xi) in x.iter().enumerate() {
            for (o, &wij) in out.iter_mut().zip(w.row(i)) {
                *o += xi * wij;
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeParams<F> {
    pub kind: ProbeKind,
    pub labels: Vec<String>,
    /// Softmax logits over layers `1..=L` (MLP only).
    pub mix_logits: Option<Tensor<F>>,
    /// `d_model → projection_dim`, applied before pooling (MLP only).
    pub projection: Option<Linear<F>>,
    /// One scoring vector per span.
    pub scorers: Vec<Tensor<F>>,
    /// ReLU hidden layer (MLP only).
    pub hidden: Option<Linear<F>>,
    pub output: Linear<F>,
}

impl<F: Scalar> ProbeParams<F> {
    pub fn init(
        kind: ProbeKind,
        n_layers: usize,
        d_model: usize,
        n_spans: usize,
        labels: Vec<String>,
        config: &ProbeConfig,
        seed: u64,
    ) -> Result<Self> {
        if labels.is_empty() {
            return Err(Error::Empty("label set"));
        }
        if !(1..=2).contains(&n_spans) {
            return Err(Error::Span(format!("probes take one or two spans, got {n_spans}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = labels.len();
        let params = match kind {
            ProbeKind::Lr => Self {
                kind,
                labels,
                mix_logits: None,
                projection: None,
                scorers: vec![Tensor::zeros(1, d_model); n_spans],
                hidden: None,
                output: Linear::init(n_spans * d_model, c, &mut rng),
            },
            ProbeKind::Mlp => {
                let p = config.projection_dim;
                Self {
                    kind,
                    labels,
                    mix_logits: Some(Tensor::zeros(1, n_layers)),
                    projection: Some(Linear::init(d_model, p, &mut rng)),
                    scorers: vec![Tensor::zeros(1, p); n_spans],
                    hidden: Some(Linear::init(n_spans * p, config.hidden_dim, &mut rng)),
                    output: Linear::init(config.hidden_dim, c, &mut rng),
                }
            }
        };
        params.validate()?;
        Ok(params)
    }

    pub fn validate(&self) -> Result<()> {
        let mlp_parts = [self.mix_logits.is_some(), self.projection.is_some(), self.hidden.is_some()];
        match self.kind {
            ProbeKind::Lr if mlp_parts.iter().any(|&b| b) => {
                return Err(Error::Invariant("a linear probe has no mix, projection or hidden layer".into()))
            }
            ProbeKind::Mlp if !mlp_parts.iter().all(|&b| b) => {
                return Err(Error::Invariant("an MLP probe needs mix, projection and hidden layer".into()))
            }
            _ => {}
        }
        if self.output.weight.cols() != self.labels.len() {
            return Err(Error::Shape(format!(
                "output layer has {} classes, label set has {}",
                self.output.weight.cols(),
                self.labels.len()
            )));
        }
        if self.tensors().iter().any(|t| !t.is_finite()) {
            return Err(Error::Invariant("probe parameters are not finite".into()));
        }
        Ok(())
    }

    pub fn n_spans(&self) -> usize {
        self.scorers.len()
    }

    /// Layer weights `n(1)..n(L)` of an MLP probe.
    pub fn mix_weights(&self) -> Option<Vec<F>> {
        self.mix_logits.as_ref().map(|t| softmax(t.data()))
    }

    pub fn named_tensors(&self) -> Vec<(String, &Tensor<F>)> {
        let mut out: Vec<(String, &Tensor<F>)> = Vec::new();
        if let Some(m) = &self.mix_logits {
            out.push(("mix.logits".into(), m));
        }
        if let Some(p) = &self.projection {
            out.push(("projection.weight".into(), &p.weight));
            out.push(("projection.bias".into(), &p.bias));
        }
        for (i, s) in self.scorers.iter().enumerate() {
            out.push((format!("pool.{i}"), s));
        }
        if let Some(h) = &self.hidden {
            out.push(("hidden.weight".into(), &h.weight));
            out.push(("hidden.bias".into(), &h.bias));
        }
        out.push(("output.weight".into(), &self.output.weight));
        out.push(("output.bias".into(), &self.output.bias));
        out
    }

    pub fn tensors(&self) -> Vec<&Tensor<F>> {
        self.named_tensors().into_iter().map(|(_, t)| t).collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor<F>> {
        let mut out: Vec<&mut Tensor<F>> = Vec::new();
        if let Some(m) = &mut self.mix_logits {
            out.push(m);
        }
        if let Some(p) = &mut self.projection {
            out.push(&mut p.weight);
            out.push(&mut p.bias);
        }
        out.extend(self.scorers.iter_mut());
        if let Some(h) = &mut self.hidden {
            out.push(&mut h.weight);
            out.push(&mut h.bias);
        }
        out.push(&mut self.output.weight);
        out.push(&mut self.output.bias);
        out
    }
}

/// The activation rows a probe reads for one example.
#[derive(Debug, Clone, PartialEq)]
pub struct SpanFeatures<F> {
    /// Per span, the span rows of every layer it uses: `A^(1)..A^(L)` for
    /// the MLP probe, just `A^(L)` for the linear probe.
    pub spans: Vec<Vec<Tensor<F>>>,
}

fn example_spans(example: &EdgeProbingExample) -> Vec<Span> {
    std::iter::once(example.span1).chain(example.span2).collect()
}

/// Runs the frozen model once and keeps the rows the probe needs.
pub fn span_features<F: Scalar>(
    kind: ProbeKind,
    model: &ModelParams<F>,
    example: &EdgeProbingExample,
) -> Result<SpanFeatures<F>> {
    masked_span_features(kind, model, example, None)
}

/// As [`span_features`], with only the heads in `mask` active.
pub fn masked_span_features<F: Scalar>(
    kind: ProbeKind,
    model: &ModelParams<F>,
    example: &EdgeProbingExample,
    mask: Option<&HeadMask>,
) -> Result<SpanFeatures<F>> {
    let tr = trace(model, &example.tokens, None, mask)?;
    features_from_trace(kind, &tr, &example_spans(example))
}

pub fn features_from_trace<F: Scalar>(
    kind: ProbeKind,
    trace: &ActivationTrace<F>,
    spans: &[Span],
) -> Result<SpanFeatures<F>> {
    let l = trace.n_layers();
    if l == 0 {
        return Err(Error::Shape("trace has no layers above the embeddings".into()));
    }
    let layers = match kind {
        ProbeKind::Lr => l..l + 1,
        ProbeKind::Mlp => 1..l + 1,
    };
    let spans = spans
        .iter()
        .map(|s| {
            s.check(trace.seq_len())?;
            Ok(layers
                .clone()
                .map(|i| trace.layers[i].slice_rows(s.start, s.len()))
                .collect())
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SpanFeatures { spans })
}

fn check_features<F: Scalar>(probe: &ProbeParams<F>, feats: &SpanFeatures<F>) -> Result<()> {
    if feats.spans.len() != probe.n_spans() {
        return Err(Error::Span(format!(
            "probe expects {} spans, example has {}",
            probe.n_spans(),
            feats.spans.len()
        )));
    }
    let want = probe.mix_logits.as_ref().map_or(1, Tensor::len);
    if feats.spans.iter().any(|s| s.len() != want) {
        return Err(Error::Shape(format!("features must carry {want} layers per span")));
    }
    Ok(())
}

/// Probe graph from per-span, per-layer representation nodes to class
/// logits (`1 × C`).
fn logits_graph<F: Scalar>(g: &mut Graph<'_, F>, probe: &ProbeParams<F>, vars: &[Var], span_reps: &[Vec<Var>]) -> Var {
    let mut it = vars.iter().copied();
    let mix = probe.mix_logits.as_ref().map(|_| {
        let logits = it.next().expect("mix logits");
        g.softmax(logits)
    });
    let projection = probe.projection.as_ref().map(|_| (it.next().unwrap(), it.next().unwrap()));
    let scorers: Vec<Var> = (0..probe.n_spans()).map(|_| it.next().unwrap()).collect();
    let hidden = probe.hidden.as_ref().map(|_| (it.next().unwrap(), it.next().unwrap()));
    let (w_out, b_out) = (it.next().unwrap(), it.next().unwrap());

    let mut pooled = Vec::with_capacity(scorers.len());
    for (rows, &scorer) in span_reps.iter().zip(&scorers) {
        let mut reps = match mix {
            None => rows[0],
            Some(weights) => {
                let mut acc: Option<Var> = None;
                for (i, &a) in rows.iter().enumerate() {
                    let w = g.element(weights, 0, i);
                    let term = g.mul_scalar(a, w);
                    acc = Some(match acc {
                        None => term,
                        Some(prev) => g.add(prev, term),
                    });
                }
                acc.expect("at least one layer")
            }
        };
        if let Some((w, b)) = projection {
            let y = g.matmul(reps, w);
            reps = g.add_row(y, b);
        }
        let scores = g.matmul_t(scorer, reps);
        let weights = g.softmax(scores);
        pooled.push(g.matmul(weights, reps));
    }
    let mut x = if pooled.len() == 1 { pooled[0] } else { g.concat_cols(&pooled) };
    if let Some((w, b)) = hidden {
        let y = g.matmul(x, w);
        let y = g.add_row(y, b);
        x = g.relu(y);
    }
    let y = g.matmul(x, w_out);
    g.add_row(y, b_out)
}

/// Cross-entropy node of `target` over representation nodes, with the
/// probe's parameter nodes in [`ProbeParams::tensors`] order.
pub(crate) fn probe_loss_on_graph<'a, F: Scalar>(
    g: &mut Graph<'a, F>,
    probe: &'a ProbeParams<F>,
    span_reps: &[Vec<Var>],
    target: usize,
) -> Result<(Var, Vec<Var>)> {
    let want = probe.mix_logits.as_ref().map_or(1, Tensor::len);
    if span_reps.len() != probe.n_spans() || span_reps.iter().any(|s| s.len() != want) {
        return Err(Error::Shape(format!(
            "probe expects {} spans of {want} layers",
            probe.n_spans()
        )));
    }
    if target >= probe.labels.len() {
        return Err(Error::UnknownLabel(format!("label index {target}")));
    }
    let vars: Vec<Var> = probe.tensors().into_iter().map(|t| g.param_ref(t)).collect();
    let logits = logits_graph(g, probe, &vars, span_reps);
    Ok((g.cross_entropy(logits, &[target]), vars))
}

/// Cross-entropy of `target` with gradients for every probe tensor, in
/// [`ProbeParams::tensors`] order.
pub fn probe_loss_and_grads<F: Scalar>(
    probe: &ProbeParams<F>,
    feats: &SpanFeatures<F>,
    target: usize,
) -> Result<(F, Vec<Tensor<F>>)> {
    check_features(probe, feats)?;
    let mut g = Graph::new();
    let span_reps: Vec<Vec<Var>> = feats
        .spans
        .iter()
        .map(|rows| rows.iter().map(|a| g.constant_ref(a)).collect())
        .collect();
    let (loss, vars) = probe_loss_on_graph(&mut g, probe, &span_reps, target)?;
    let mut grads = g.backward(loss);
    let out = vars
        .iter()
        .zip(probe.tensors())
        .map(|(&v, t)| grads.take_or_zeros(v, t))
        .collect();
    Ok((g.scalar_value(loss), out))
}

/// Class logits computed directly, without a graph.
pub fn probe_logits<F: Scalar>(probe: &ProbeParams<F>, feats: &SpanFeatures<F>) -> Result<Vec<F>> {
    check_features(probe, feats)?;
    let mix = probe.mix_weights();
    let mut x = Vec::new();
    for (rows, scorer) in feats.spans.iter().zip(&probe.scorers) {
        let mut reps = match &mix {
            None => rows[0].clone(),
            Some(w) => {
                let mut acc = Tensor::zeros(rows[0].rows(), rows[0].cols());
                for (a, &wi) in rows.iter().zip(w) {
                    for (o, &v) in acc.data_mut().iter_mut().zip(a.data()) {
                        *o += wi * v;
                    }
                }
                acc
            }
        };
        if let Some(p) = &probe.projection {
            let projected: Vec<Vec<F>> = (0..reps.rows()).map(|i| p.apply(reps.row(i))).collect();
            reps = Tensor::from_rows(&projected);
        }
        let span = Span::new(0, reps.rows());
        x.extend(pool_span(&reps, span, scorer.data())?);
    }
    if let Some(h) = &probe.hidden {
        x = h.apply(&x).into_iter().map(|v| v.max(F::zero())).collect();
    }
    Ok(probe.output.apply(&x))
}

/// Most probable label index; ties go to the lowest index.
pub fn probe_predict<F: Scalar>(
    probe: &ProbeParams<F>,
    model: &ModelParams<F>,
    example: &EdgeProbingExample,
) -> Result<usize> {
    let feats = span_features(probe.kind, model, example)?;
    Ok(argmax(&probe_logits(probe, &feats)?))
}

/// Features for every example, computed in parallel.
pub fn dataset_features<F: Scalar>(
    kind: ProbeKind,
    model: &ModelParams<F>,
    dataset: &Dataset,
) -> Result<Vec<SpanFeatures<F>>> {
    dataset
        .examples
        .par_iter()
        .map(|e| span_features(kind, model, e))
        .collect()
}

/// Trains a probe on a frozen model. The model is only read.
pub fn train_probe<F: Scalar>(
    kind: ProbeKind,
    model: &ModelParams<F>,
    dataset: &Dataset,
    config: &ProbeConfig,
    seed: u64,
) -> Result<(ProbeParams<F>, TrainLog)> {
    config.validate()?;
    if dataset.is_empty() {
        return Err(Error::Empty("training set"));
    }
    let feats = dataset_features(kind, model, dataset)?;
    let targets = dataset.targets()?;
    let n_spans = if dataset.is_binary() { 2 } else { 1 };
    let c = &model.config;
    let probe = ProbeParams::init(kind, c.n_layers, c.d_model, n_spans, dataset.labels.clone(), config, seed)?;
    train_on_features(probe, &feats, &targets, config, seed)
}

/// Optimizes an initialized probe on precomputed features.
pub fn train_on_features<F: Scalar>(
    mut probe: ProbeParams<F>,
    feats: &[SpanFeatures<F>],
    targets: &[usize],
    config: &ProbeConfig,
    seed: u64,
) -> Result<(ProbeParams<F>, TrainLog)> {
    if feats.is_empty() {
        return Err(Error::Empty("training set"));
    }
    if feats.len() != targets.len() {
        return Err(Error::Shape("one target per example".into()));
    }
    let mut adam = Adam::new(config.optimizer, probe.tensors());
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let mut order: Vec<usize> = (0..feats.len()).collect();
    let mut log = TrainLog::default();
    for _ in 0..config.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(config.batch_size) {
            let current = &probe;
            let (loss, grads) = mean_loss_and_grads(batch, |&i| probe_loss_and_grads(current, &feats[i], targets[i]))?;
            adam.step(&mut probe.tensors_mut(), &grads);
            log.batch_losses.push(loss.as_f64());
        }
    }
    probe.validate()?;
    Ok((probe, log))
}

/// Predictions for every example, in parallel.
pub fn probe_predict_all<F: Scalar>(probe: &ProbeParams<F>, feats: &[SpanFeatures<F>]) -> Result<Vec<usize>> {
    feats
        .par_iter()
        .map(|f| probe_logits(probe, f).map(|l| argmax(&l)))
        .collect()
}

/// Percentage of `dataset` the probe labels correctly.
pub fn probe_accuracy<F: Scalar>(probe: &ProbeParams<F>, model: &ModelParams<F>, dataset: &Dataset) -> Result<f64> {
    masked_probe_accuracy(probe, model, dataset, None)
}

/// Accuracy with the features read under a head mask.
pub fn masked_probe_accuracy<F: Scalar>(
    probe: &ProbeParams<F>,
    model: &ModelParams<F>,
    dataset: &Dataset,
    mask: Option<&HeadMask>,
) -> Result<f64> {
    if dataset.is_empty() {
        return Err(Error::Empty("evaluation set"));
    }
    let feats = dataset
        .examples
        .par_iter()
        .map(|e| masked_span_features(probe.kind, model, e, mask))
        .collect::<Result<Vec<_>>>()?;
    let preds = probe_predict_all(probe, &feats)?;
    let mut correct = 0;
    for (p, e) in preds.iter().zip(&dataset.examples) {
        // Labels unseen in training can never be predicted.
        if probe.labels.get(*p) == Some(&e.label) {
            correct += 1;
        }
    }
    Ok(100.0 * correct as f64 / dataset.len() as f64)
}

/// Stores a probe with its kind, task and labels in the header metadata.
pub fn save_probe<F: Scalar>(probe: &ProbeParams<F>, task: &str, path: &Path) -> Result<()> {
    let mut file = TensorFile::new(None);
    file.metadata.insert("kind".into(), "probe".into());
    file.metadata.insert("probe_kind".into(), probe.kind.name().into());
    file.metadata.insert("task".into(), task.into());
    file.metadata.insert("labels".into(), serde_json::to_value(&probe.labels)?);
    for (name, t) in probe.named_tensors() {
        file.push(name, t.clone());
    }
    file.write(path, F::DTYPE)
}

/// Reads a probe written by [`save_probe`], returning it with its task.
pub fn load_probe<F: Scalar>(path: &Path) -> Result<(ProbeParams<F>, String)> {
    let file = TensorFile::<F>::read(path)?;
    let kind = match file.metadata_str("probe_kind") {
        Some("lr") => ProbeKind::Lr,
        Some("mlp") => ProbeKind::Mlp,
        other => return Err(Error::Header(format!("unknown probe kind {other:?}"))),
    };
    let labels: Vec<String> = file
        .metadata
        .get("labels")
        .cloned()
        .map(serde_json::from_value)
        .transpose()?
        .ok_or_else(|| Error::Header("probe file lacks labels".into()))?;
    let task = file.metadata_str("task").unwrap_or_default().to_string();
    let mut named: std::collections::HashMap<String, Tensor<F>> = file.tensors.into_iter().collect();
    let mut take = |name: &str| named.remove(name);
    let linear = |prefix: &str, take: &mut dyn FnMut(&str) -> Option<Tensor<F>>| -> Option<Linear<F>> {
        Some(Linear {
            weight: take(&format!("{prefix}.weight"))?,
            bias: take(&format!("{prefix}.bias"))?,
        })
    };
    let mix_logits = take("mix.logits");
    let projection = linear("projection", &mut take);
    let mut scorers = Vec::new();
    while let Some(s) = take(&format!("pool.{}", scorers.len())) {
        scorers.push(s);
    }
    let hidden = linear("hidden", &mut take);
    let output = linear("output", &mut take).ok_or_else(|| Error::Header("probe file lacks the output layer".into()))?;
    if let Some(name) = named.keys().next() {
        return Err(Error::Header(format!("unexpected probe tensor {name}")));
    }
    let probe = ProbeParams {
        kind,
        labels,
        mix_logits,
        projection,
        scorers,
        hidden,
        output,
    };
    probe.validate()?;
    Ok((probe, task))
}

#[cfg(test)]
mod tests;
