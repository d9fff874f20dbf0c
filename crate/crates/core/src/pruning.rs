//! Exactly-K attention-head selection learned jointly with a prefix.
//!
//! Gate logits are perturbed with Gumbel noise and relaxed into soft top-K
//! weights that drive the forward pass. With `straight_through` the forward
//! pass sees the hard top-K mask instead and gradients flow through the
//! relaxation. Evaluation uses the noiseless top-K of the logits.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gumbel};
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::data::{Dataset, EdgeProbingExample, Span};
use crate::diagnostic::{probe_loss_on_graph, ProbeConfig, ProbeKind, ProbeParams};
use crate::error::{Error, Result};
use crate::lm::{forward_graph, BoundModel, Gates, HeadMask, Logits, MaskMode, ModelParams, PrefixParams};
use crate::optim::{mean_loss_and_grads, Adam, AdamConfig};
use crate::prompting::{verbalizer_loss, LossScope, PrefixTrainConfig, PromptExample, TrainLog, Verbalizer};
use crate::tensor::{soft_top_k, Scalar, Tensor};

/// Geometric interpolation from `start` to `end` over `steps` steps.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TemperatureSchedule {
    pub start: f64,
    pub end: f64,
    pub steps: usize,
}

impl Default for TemperatureSchedule {
    fn default() -> Self {
        Self {
            start: 1.0,
            end: 0.1,
            steps: 1,
        }
    }
}

impl TemperatureSchedule {
    pub fn validate(&self) -> Result<()> {
        if !(self.start > 0.0 && self.end > 0.0) || !self.start.is_finite() || !self.end.is_finite() {
            return Err(Error::Config(format!(
                "temperatures must be positive and finite, got {} -> {}",
                self.start, self.end
            )));
        }
        Ok(())
    }

    /// Temperature at `step`; steps past the end stay at `end`.
    pub fn at(&self, step: usize) -> f64 {
        if self.steps <= 1 {
            return if step == 0 { self.start } else { self.end };
        }
        let frac = step.min(self.steps - 1) as f64 / (self.steps - 1) as f64;
        self.start * (self.end / self.start).powf(frac)
    }
}

/// Per-head gate logits and the number of heads to keep.
#[derive(Debug, Clone, PartialEq)]
pub struct GateParams<F> {
    /// `L × H`.
    pub logits: Tensor<F>,
    pub k: usize,
    pub schedule: TemperatureSchedule,
}

impl<F: Scalar> GateParams<F> {
    /// All logits zero.
    pub fn new(n_layers: usize, n_heads: usize, k: usize, schedule: TemperatureSchedule) -> Result<Self> {
        let gates = Self {
            logits: Tensor::zeros(n_layers, n_heads),
            k,
            schedule,
        };
        gates.validate()?;
        Ok(gates)
    }

    pub fn from_logits(logits: Tensor<F>, k: usize, schedule: TemperatureSchedule) -> Result<Self> {
        let gates = Self { logits, k, schedule };
        gates.validate()?;
        Ok(gates)
    }

    pub fn validate(&self) -> Result<()> {
        check_k(self.k, self.logits.len())?;
        self.schedule.validate()?;
        if !self.logits.is_finite() {
            return Err(Error::Invariant("gate logits are not finite".into()));
        }
        Ok(())
    }

    pub fn n_layers(&self) -> usize {
        self.logits.rows()
    }

    pub fn n_heads(&self) -> usize {
        self.logits.cols()
    }

    /// Logits plus the noise drawn for `seed` (none without a seed).
    fn keys(&self, seed: Option<u64>) -> Vec<f64> {
        let mut keys: Vec<f64> = self.logits.data().iter().map(|v| v.as_f64()).collect();
        if let Some(seed) = seed {
            for (k, g) in keys.iter_mut().zip(gumbel_noise(self.logits.len(), seed)) {
                *k += g;
            }
        }
        keys
    }
}

fn check_k(k: usize, total: usize) -> Result<()> {
    if k == 0 || k > total {
        return Err(Error::Config(format!("K = {k} outside 1..={total}")));
    }
    Ok(())
}

/// Standard Gumbel draws.
pub fn gumbel_noise(n: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dist = Gumbel::new(0.0, 1.0).expect("unit Gumbel");
    (0..n).map(|_| dist.sample(&mut rng)).collect()
}

/// Indices of the `k` largest keys, in index order. Ties prefer lower
/// indices.
pub fn top_k_indices(keys: &[f64], k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..keys.len()).collect();
    order.sort_by(|&a, &b| keys[b].total_cmp(&keys[a]).then(a.cmp(&b)));
    let mut out = order[..k.min(keys.len())].to_vec();
    out.sort_unstable();
    out
}

fn hard_from_indices(n_layers: usize, n_heads: usize, idx: &[usize]) -> Result<HeadMask> {
    let heads: Vec<(usize, usize)> = idx.iter().map(|&i| (i / n_heads, i % n_heads)).collect();
    HeadMask::keep(n_layers, n_heads, &heads)
}

/// Materializes a mask. With a `seed` the logits are Gumbel-perturbed,
/// otherwise the noiseless logits are used.
pub fn sample_mask<F: Scalar>(
    gates: &GateParams<F>,
    mode: MaskMode,
    temperature: f64,
    seed: Option<u64>,
) -> Result<HeadMask> {
    gates.validate()?;
    if !(temperature > 0.0) {
        return Err(Error::Config(format!("temperature {temperature} must be positive")));
    }
    let keys = gates.keys(seed);
    let (l, h) = (gates.n_layers(), gates.n_heads());
    let mask = match mode {
        MaskMode::Soft => HeadMask::soft(l, h, soft_top_k(&keys, gates.k, temperature))?,
        MaskMode::Hard => hard_from_indices(l, h, &top_k_indices(&keys, gates.k))?,
    };
    if mode == MaskMode::Hard {
        mask.check_hard(gates.k)?;
    }
    Ok(mask)
}

/// The `L × H` gate node fed to the forward pass. With `straight_through`
/// its value is the hard top-K of `logits + noise` and its gradient that
/// of the soft relaxation; otherwise it is the soft relaxation itself.
pub fn gate_node<F: Scalar>(
    g: &mut Graph<'_, F>,
    logits: Var,
    noise: &[f64],
    k: usize,
    temperature: f64,
    straight_through: bool,
) -> Result<Var> {
    let (l, h) = g.value(logits).shape();
    check_k(k, l * h)?;
    if noise.len() != l * h {
        return Err(Error::Shape(format!("{} noise values for {} gates", noise.len(), l * h)));
    }
    let noise_t = Tensor::from_vec(l, h, noise.iter().map(|&v| F::of(v)).collect());
    let noise_v = g.constant(noise_t);
    let keys = g.add(logits, noise_v);
    let soft = g.soft_top_k(keys, k, temperature);
    if !straight_through {
        return Ok(soft);
    }
    let key_values: Vec<f64> = g.value(keys).data().iter().map(|v| v.as_f64()).collect();
    let hard = top_k_indices(&key_values, k);
    let soft_value = g.value(soft);
    let mut offset = Tensor::zeros(l, h);
    for i in 0..l * h {
        let target = if hard.binary_search(&i).is_ok() { F::one() } else { F::zero() };
        offset.data_mut()[i] = target - soft_value.data()[i];
    }
    let offset = g.constant(offset);
    Ok(g.add(soft, offset))
}

/// Verbalizer cross-entropy of one example through a gated forward pass.
/// Gradients: every prefix tensor, then the gate logits.
#[allow(clippy::too_many_arguments)]
pub fn joint_loss_and_grads<F: Scalar>(
    model: &ModelParams<F>,
    prefix: &PrefixParams<F>,
    gates: &GateParams<F>,
    example: &PromptExample,
    verbalizer: &Verbalizer,
    noise: &[f64],
    temperature: f64,
    straight_through: bool,
    scope: LossScope,
) -> Result<(F, Vec<Tensor<F>>)> {
    let mut g = Graph::new();
    let bound_model = BoundModel::bind(&mut g, model, false);
    let bound_prefix = prefix.bind(&mut g, true);
    let logits = g.param_ref(&gates.logits);
    let gate = gate_node(&mut g, logits, noise, gates.k, temperature, straight_through)?;
    let out = forward_graph(
        &mut g,
        &model.config,
        &bound_model,
        &example.pattern.tokens,
        Some(&bound_prefix),
        Some(Gates::Node(gate)),
        Logits::Last,
    )?;
    let last = out.logits.expect("last logits requested");
    let loss = verbalizer_loss(&mut g, last, verbalizer, example.target, scope);
    let mut grads = g.backward(loss);
    let mut out: Vec<Tensor<F>> = bound_prefix
        .vars()
        .into_iter()
        .zip(prefix.tensors())
        .map(|(v, t)| grads.take_or_zeros(v, t))
        .collect();
    out.push(grads.take_or_zeros(logits, &gates.logits));
    Ok((g.scalar_value(loss), out))
}

/// Gate settings shared by every joint pruning run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GateTrainConfig {
    pub k: usize,
    pub gate_lr: f64,
    pub temperature_start: f64,
    pub temperature_end: f64,
    /// Forward with the hard mask and differentiate through the soft one;
    /// otherwise the soft mask drives the forward pass too.
    pub straight_through: bool,
}

impl Default for GateTrainConfig {
    fn default() -> Self {
        Self {
            k: 96,
            gate_lr: 1e-2,
            temperature_start: 1.0,
            temperature_end: 0.1,
            straight_through: false,
        }
    }
}

impl GateTrainConfig {
    pub fn validate(&self, n_layers: usize, n_heads: usize) -> Result<()> {
        check_k(self.k, n_layers * n_heads)?;
        if !(self.gate_lr > 0.0) {
            return Err(Error::Config("gate_lr must be positive".into()));
        }
        TemperatureSchedule {
            start: self.temperature_start,
            end: self.temperature_end,
            steps: 1,
        }
        .validate()
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct JointTrainConfig {
    pub prefix: PrefixTrainConfig,
    pub gates: GateTrainConfig,
}

/// Trained prefix and gates plus the hard masks seen during training.
#[derive(Debug, Clone)]
pub struct JointOutcome<F> {
    pub prefix: PrefixParams<F>,
    pub gates: GateParams<F>,
    pub log: TrainLog,
    /// Heads kept by each step's hard mask, in step order.
    pub step_masks: Vec<Vec<(usize, usize)>>,
}

struct GateRun<F> {
    gates: GateParams<F>,
    log: TrainLog,
    step_masks: Vec<Vec<(usize, usize)>>,
}

/// Shared optimization loop: `params` and the gate logits take one Adam
/// step per batch. `loss` returns the gradients of `params` followed by the
/// gate gradient.
#[allow(clippy::too_many_arguments)]
fn joint_loop<F: Scalar, P: Sync>(
    params: &mut P,
    tensors: fn(&P) -> Vec<&Tensor<F>>,
    tensors_mut: fn(&mut P) -> Vec<&mut Tensor<F>>,
    optimizer: AdamConfig,
    (n_layers, n_heads): (usize, usize),
    config: &GateTrainConfig,
    (n_examples, batch_size, epochs): (usize, usize, usize),
    seed: u64,
    loss: impl Fn(&P, &GateParams<F>, usize, &[f64], f64) -> Result<(F, Vec<Tensor<F>>)> + Sync,
) -> Result<GateRun<F>> {
    let schedule = TemperatureSchedule {
        start: config.temperature_start,
        end: config.temperature_end,
        steps: n_examples.div_ceil(batch_size) * epochs,
    };
    let mut gates = GateParams::<F>::new(n_layers, n_heads, config.k, schedule)?;
    let mut param_opt = Adam::new(optimizer, tensors(params));
    let mut gate_opt = Adam::new(
        AdamConfig {
            lr: config.gate_lr,
            ..optimizer
        },
        [&gates.logits],
    );
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let mut order: Vec<usize> = (0..n_examples).collect();
    let mut log = TrainLog::default();
    let mut step_masks = Vec::with_capacity(schedule.steps);
    let mut step = 0;
    for _ in 0..epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(batch_size) {
            let temperature = schedule.at(step);
            let noise_seed = seed.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(step as u64);
            let noise = gumbel_noise(n_layers * n_heads, noise_seed);
            let keys: Vec<f64> = gates
                .logits
                .data()
                .iter()
                .zip(&noise)
                .map(|(l, n)| l.as_f64() + n)
                .collect();
            let hard = hard_from_indices(n_layers, n_heads, &top_k_indices(&keys, config.k))?;
            hard.check_hard(config.k)?;
            step_masks.push(hard.kept());

            let (cur, cur_gates) = (&*params, &gates);
            let (value, mut grads) =
                mean_loss_and_grads(batch, |&i| loss(cur, cur_gates, i, &noise, temperature))?;
            let gate_grad = grads.pop().expect("gate gradient");
            param_opt.step(&mut tensors_mut(params), &grads);
            gate_opt.step(&mut [&mut gates.logits], &[gate_grad]);
            log.batch_losses.push(value.as_f64());
            step += 1;
        }
    }
    gates.validate()?;
    Ok(GateRun {
        gates,
        log,
        step_masks,
    })
}

/// Optimizes a prefix and gate logits together, LM weights frozen.
pub fn train_joint<F: Scalar>(
    model: &ModelParams<F>,
    examples: &[PromptExample],
    verbalizer: &Verbalizer,
    config: &JointTrainConfig,
    seed: u64,
) -> Result<JointOutcome<F>> {
    let mc = &model.config;
    config.prefix.validate()?;
    config.gates.validate(mc.n_layers, mc.n_heads)?;
    if examples.is_empty() {
        return Err(Error::Empty("training set"));
    }
    if let Some(e) = examples.iter().find(|e| e.target >= verbalizer.len()) {
        return Err(Error::UnknownLabel(format!("label index {}", e.target)));
    }
    let pc = &config.prefix;
    let mut prefix = PrefixParams::init(mc, pc.prefix_len, pc.init_std, seed);
    let run = joint_loop(
        &mut prefix,
        PrefixParams::tensors,
        PrefixParams::tensors_mut,
        pc.optimizer,
        (mc.n_layers, mc.n_heads),
        &config.gates,
        (examples.len(), pc.batch_size, pc.epochs),
        seed,
        |p, g, i, noise, temperature| {
            joint_loss_and_grads(
                model,
                p,
                g,
                &examples[i],
                verbalizer,
                noise,
                temperature,
                config.gates.straight_through,
                pc.loss,
            )
        },
    )?;
    prefix.validate(mc)?;
    Ok(JointOutcome {
        prefix,
        gates: run.gates,
        log: run.log,
        step_masks: run.step_masks,
    })
}

/// Probe cross-entropy of one example through a gated forward pass.
/// Gradients: every probe tensor, then the gate logits.
#[allow(clippy::too_many_arguments)]
pub fn joint_probe_loss_and_grads<F: Scalar>(
    model: &ModelParams<F>,
    probe: &ProbeParams<F>,
    gates: &GateParams<F>,
    example: &EdgeProbingExample,
    target: usize,
    noise: &[f64],
    temperature: f64,
    straight_through: bool,
) -> Result<(F, Vec<Tensor<F>>)> {
    let mut g = Graph::new();
    let bound_model = BoundModel::bind(&mut g, model, false);
    let logits = g.param_ref(&gates.logits);
    let gate = gate_node(&mut g, logits, noise, gates.k, temperature, straight_through)?;
    let out = forward_graph(
        &mut g,
        &model.config,
        &bound_model,
        &example.tokens,
        None,
        Some(Gates::Node(gate)),
        Logits::None,
    )?;
    let l = model.config.n_layers;
    let layers = match probe.kind {
        ProbeKind::Lr => l..l + 1,
        ProbeKind::Mlp => 1..l + 1,
    };
    let spans: Vec<Span> = std::iter::once(example.span1).chain(example.span2).collect();
    let mut span_reps = Vec::with_capacity(spans.len());
    for s in &spans {
        s.check(example.tokens.len())?;
        span_reps.push(layers.clone().map(|i| g.slice_rows(out.layers[i], s.start, s.len())).collect());
    }
    let (loss, vars) = probe_loss_on_graph(&mut g, probe, &span_reps, target)?;
    let mut grads = g.backward(loss);
    let mut out: Vec<Tensor<F>> = vars
        .iter()
        .zip(probe.tensors())
        .map(|(&v, t)| grads.take_or_zeros(v, t))
        .collect();
    out.push(grads.take_or_zeros(logits, &gates.logits));
    Ok((g.scalar_value(loss), out))
}

#[derive(Debug, Clone)]
pub struct JointProbeOutcome<F> {
    pub probe: ProbeParams<F>,
    pub gates: GateParams<F>,
    pub log: TrainLog,
    pub step_masks: Vec<Vec<(usize, usize)>>,
}

/// Trains a diagnostic probe and gate logits together on the gated model.
pub fn train_joint_probe<F: Scalar>(
    kind: ProbeKind,
    model: &ModelParams<F>,
    dataset: &Dataset,
    probe_config: &ProbeConfig,
    gate_config: &GateTrainConfig,
    seed: u64,
) -> Result<JointProbeOutcome<F>> {
    let mc = &model.config;
    probe_config.validate()?;
    gate_config.validate(mc.n_layers, mc.n_heads)?;
    if dataset.is_empty() {
        return Err(Error::Empty("training set"));
    }
    let targets = dataset.targets()?;
    let n_spans = if dataset.is_binary() { 2 } else { 1 };
    let mut probe = ProbeParams::init(kind, mc.n_layers, mc.d_model, n_spans, dataset.labels.clone(), probe_config, seed)?;
    let run = joint_loop(
        &mut probe,
        ProbeParams::tensors,
        ProbeParams::tensors_mut,
        probe_config.optimizer,
        (mc.n_layers, mc.n_heads),
        gate_config,
        (dataset.len(), probe_config.batch_size, probe_config.epochs),
        seed,
        |p, g, i, noise, temperature| {
            joint_probe_loss_and_grads(
                model,
                p,
                g,
                &dataset.examples[i],
                targets[i],
                noise,
                temperature,
                gate_config.straight_through,
            )
        },
    )?;
    probe.validate()?;
    Ok(JointProbeOutcome {
        probe,
        gates: run.gates,
        log: run.log,
        step_masks: run.step_masks,
    })
}

/// Essential heads (kept) and their complement.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HeadPartition {
    pub n_layers: usize,
    pub n_heads: usize,
    /// 0-based `(layer, head)`, lexicographic.
    pub essential: Vec<(usize, usize)>,
}

impl HeadPartition {
    pub fn new(n_layers: usize, n_heads: usize, essential: Vec<(usize, usize)>) -> Result<Self> {
        let set: BTreeSet<(usize, usize)> = essential.iter().copied().collect();
        if set.len() != essential.len() {
            return Err(Error::Invariant("duplicate essential head".into()));
        }
        if let Some(&(l, h)) = set.iter().find(|&&(l, h)| l >= n_layers || h >= n_heads) {
            return Err(Error::Shape(format!("head ({l}, {h}) outside {n_layers}x{n_heads} grid")));
        }
        Ok(Self {
            n_layers,
            n_heads,
            essential: set.into_iter().collect(),
        })
    }

    pub fn k(&self) -> usize {
        self.essential.len()
    }

    pub fn non_essential(&self) -> Vec<(usize, usize)> {
        (0..self.n_layers)
            .flat_map(|l| (0..self.n_heads).map(move |h| (l, h)))
            .filter(|p| self.essential.binary_search(p).is_err())
            .collect()
    }

    pub fn essential_mask(&self) -> HeadMask {
        HeadMask::keep(self.n_layers, self.n_heads, &self.essential).expect("validated heads")
    }

    pub fn non_essential_mask(&self) -> HeadMask {
        HeadMask::keep(self.n_layers, self.n_heads, &self.non_essential()).expect("validated heads")
    }

    /// Essential-head count per layer.
    pub fn layer_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.n_layers];
        for &(l, _) in &self.essential {
            counts[l] += 1;
        }
        counts
    }

    pub fn to_file(&self, task: &str, seeds: &[u64]) -> PartitionFile {
        PartitionFile {
            task: task.to_string(),
            k: self.k(),
            essential: self.essential.iter().map(|&(l, h)| [l + 1, h + 1]).collect(),
            seeds: seeds.to_vec(),
        }
    }

    pub fn from_file(file: &PartitionFile, n_layers: usize, n_heads: usize) -> Result<Self> {
        if file.essential.len() != file.k {
            return Err(Error::Invariant(format!(
                "partition lists {} heads but K = {}",
                file.essential.len(),
                file.k
            )));
        }
        let heads = file
            .essential
            .iter()
            .map(|&[l, h]| {
                if l == 0 || h == 0 {
                    Err(Error::Shape("partition heads are numbered from 1".into()))
                } else {
                    Ok((l - 1, h - 1))
                }
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(n_layers, n_heads, heads)
    }
}

/// On-disk partition; layers and heads numbered from 1.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PartitionFile {
    pub task: String,
    #[serde(rename = "K")]
    pub k: usize,
    pub essential: Vec<[usize; 2]>,
    pub seeds: Vec<u64>,
}

/// Noiseless top-`k` of the gate logits; ties go to the lexicographically
/// smaller `(layer, head)`.
pub fn essential_partition<F: Scalar>(gates: &GateParams<F>, k: usize) -> Result<HeadPartition> {
    check_k(k, gates.logits.len())?;
    let keys: Vec<f64> = gates.logits.data().iter().map(|v| v.as_f64()).collect();
    let h = gates.n_heads();
    let heads = top_k_indices(&keys, k).into_iter().map(|i| (i / h, i % h)).collect();
    HeadPartition::new(gates.n_layers(), h, heads)
}

#[cfg(test)]
mod tests;
