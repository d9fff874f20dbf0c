//! Baselines, control tasks, selectivity, layer distributions and amnesic
//! language-model evaluation.

use std::collections::BTreeMap;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::lm::{sequence_nll, HeadMask, ModelParams};
use crate::prompting::{accuracy, train_prefix, PrefixTrainConfig, PromptExample, Verbalizer};
use crate::pruning::HeadPartition;
use crate::tensor::Scalar;

/// Rounds a percentage to two decimals.
pub fn round2(x: f64) -> f64 {
    (x * 100.0).round() / 100.0
}

/// Share (in percent) of `test` carrying the most frequent label of `train`.
/// Ties go to the label listed first in the train inventory.
pub fn majority_baseline(train: &Dataset, test: &Dataset) -> Result<f64> {
    if train.is_empty() {
        return Err(Error::Empty("train split"));
    }
    if test.is_empty() {
        return Err(Error::Empty("test split"));
    }
    let counts = train.label_counts();
    let mut best: Option<(&str, usize)> = None;
    let order = train.labels.iter().map(String::as_str).chain(counts.keys().map(String::as_str));
    for label in order {
        let c = counts.get(label).copied().unwrap_or(0);
        if best.is_none_or(|(_, b)| c > b) {
            best = Some((label, c));
        }
    }
    let majority = best.expect("non-empty train split").0;
    let hits = test.examples.iter().filter(|e| e.label == majority).count();
    Ok(100.0 * hits as f64 / test.len() as f64)
}

/// Uniform guessing over `n_labels` classes, in percent to two decimals.
pub fn chance_baseline(n_labels: usize) -> Result<f64> {
    if n_labels == 0 {
        return Err(Error::Empty("label set"));
    }
    Ok(round2(100.0 / n_labels as f64))
}

/// Label index for a word type: the first 8 bytes of
/// `sha256(seed_le ‖ word)` modulo the label count.
pub fn control_label_index(word: &str, seed: u64, n_labels: usize) -> usize {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(word.as_bytes());
    let digest = h.finalize();
    let mut head = [0u8; 8];
    head.copy_from_slice(&digest[..8]);
    (u64::from_le_bytes(head) % n_labels as u64) as usize
}

/// Replaces every label with one drawn per word type. Only unary tasks whose
/// spans cover a single word qualify. The label inventory is kept.
pub fn make_control_task(dataset: &Dataset, seed: u64) -> Result<Dataset> {
    if dataset.labels.is_empty() {
        return Err(Error::Empty("label set"));
    }
    let mut out = dataset.clone();
    for e in &mut out.examples {
        if e.span2.is_some() {
            return Err(Error::Unsupported("control tasks need unary span examples".into()));
        }
        if e.word_span1.len() != 1 {
            return Err(Error::Unsupported(format!(
                "control tasks need single-word spans, found {} words",
                e.word_span1.len()
            )));
        }
        let word = e.span1_words();
        e.label = dataset.labels[control_label_index(&word, seed, dataset.labels.len())].clone();
    }
    Ok(out)
}

/// Pearson χ² statistic of `counts` against the uniform distribution.
pub fn chi_square_uniform(counts: &[usize]) -> f64 {
    let total: usize = counts.iter().sum();
    let expected = total as f64 / counts.len() as f64;
    counts
        .iter()
        .map(|&c| (c as f64 - expected).powi(2) / expected)
        .sum()
}

/// Task accuracy minus control accuracy, to two decimals.
pub fn selectivity_delta(task_acc: f64, control_acc: f64) -> Result<f64> {
    for (name, v) in [("task", task_acc), ("control", control_acc)] {
        if !(0.0..=100.0).contains(&v) {
            return Err(Error::Config(format!("{name} accuracy {v} outside [0, 100]")));
        }
    }
    Ok(round2(task_acc - control_acc))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DistributionSource {
    PpHeads,
    LrHeads,
    MlpScalarMix,
}

/// Weights over layers `1..=L`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerDistribution {
    pub source: DistributionSource,
    pub weights: Vec<f64>,
}

impl LayerDistribution {
    pub fn new(source: DistributionSource, weights: Vec<f64>) -> Result<Self> {
        let d = Self { source, weights };
        d.validate()?;
        Ok(d)
    }

    pub fn validate(&self) -> Result<()> {
        if self.weights.is_empty() {
            return Err(Error::Empty("layer distribution"));
        }
        if self.weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::Invariant("layer weights must be finite and nonnegative".into()));
        }
        let total: f64 = self.weights.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::Invariant(format!("layer weights sum to {total}")));
        }
        Ok(())
    }

    /// Essential-head counts per layer divided by K.
    pub fn from_partition(partition: &HeadPartition, source: DistributionSource) -> Result<Self> {
        if partition.k() == 0 {
            return Err(Error::Empty("partition"));
        }
        let k = partition.k() as f64;
        Self::new(source, partition.layer_counts().iter().map(|&c| c as f64 / k).collect())
    }

    /// Mixing weights widened to f64. A sum within 32-bit rounding of one is
    /// accepted and renormalized.
    pub fn from_mix<F: Scalar>(weights: &[F]) -> Result<Self> {
        let wide: Vec<f64> = weights.iter().map(|w| w.as_f64()).collect();
        let total: f64 = wide.iter().sum();
        if !((total - 1.0).abs() <= 1e-5) {
            return Err(Error::Invariant(format!("mixing weights sum to {total}")));
        }
        Self::new(DistributionSource::MlpScalarMix, wide.iter().map(|w| w / total).collect())
    }

    /// Arithmetic mean of distributions of equal length and source.
    pub fn average(dists: &[LayerDistribution]) -> Result<Self> {
        let first = dists.first().ok_or(Error::Empty("distribution list"))?;
        let l = first.weights.len();
        if dists.iter().any(|d| d.weights.len() != l || d.source != first.source) {
            return Err(Error::Shape("averaged distributions must share length and source".into()));
        }
        let n = dists.len() as f64;
        let weights = (0..l).map(|i| dists.iter().map(|d| d.weights[i]).sum::<f64>() / n).collect();
        Self::new(first.source, weights)
    }

    /// Expected layer, counting from 1.
    pub fn center_of_gravity(&self) -> f64 {
        self.weights.iter().enumerate().map(|(i, w)| w * (i + 1) as f64).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AmnesicMode {
    Vanilla,
    DropEssential,
    KeepRandomK,
}

impl AmnesicMode {
    pub const ALL: [AmnesicMode; 3] = [AmnesicMode::Vanilla, AmnesicMode::DropEssential, AmnesicMode::KeepRandomK];

    pub fn name(self) -> &'static str {
        match self {
            AmnesicMode::Vanilla => "vanilla",
            AmnesicMode::DropEssential => "drop-essential",
            AmnesicMode::KeepRandomK => "keep-random-k",
        }
    }
}

/// The hard mask a mode evaluates under. Drop-essential keeps the
/// non-essential heads; keep-random-k keeps as many heads, drawn uniformly.
pub fn amnesic_mask(partition: &HeadPartition, mode: AmnesicMode, seed: u64) -> Result<HeadMask> {
    let (l, h) = (partition.n_layers, partition.n_heads);
    match mode {
        AmnesicMode::Vanilla => Ok(HeadMask::ones(l, h)),
        AmnesicMode::DropEssential => Ok(partition.non_essential_mask()),
        AmnesicMode::KeepRandomK => {
            let keep = l * h - partition.k();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut idx = sample(&mut rng, l * h, keep).into_vec();
            idx.sort_unstable();
            let heads: Vec<(usize, usize)> = idx.into_iter().map(|i| (i / h, i % h)).collect();
            HeadMask::keep(l, h, &heads)
        }
    }
}

/// Token-weighted mean cross-entropy (nats) over `sequences`.
pub fn corpus_loss<F: Scalar>(model: &ModelParams<F>, sequences: &[Vec<usize>], mask: Option<&HeadMask>) -> Result<f64> {
    if sequences.is_empty() {
        return Err(Error::Empty("corpus"));
    }
    let parts = sequences
        .par_iter()
        .map(|s| sequence_nll(model, s, mask))
        .collect::<Result<Vec<_>>>()?;
    let (total, count) = parts.iter().fold((0.0, 0), |(t, c), &(nll, n)| (t + nll, c + n));
    Ok(total / count as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LmLossEntry {
    pub mode: AmnesicMode,
    pub loss: f64,
    /// Increase over the vanilla loss.
    pub delta: f64,
}

/// Loss under `mode` and its increase over the unmasked model.
pub fn amnesic_eval<F: Scalar>(
    model: &ModelParams<F>,
    partition: &HeadPartition,
    sequences: &[Vec<usize>],
    mode: AmnesicMode,
    seed: u64,
) -> Result<LmLossEntry> {
    check_partition(model, partition)?;
    let vanilla = corpus_loss(model, sequences, None)?;
    let loss = match mode {
        AmnesicMode::Vanilla => vanilla,
        _ => corpus_loss(model, sequences, Some(&amnesic_mask(partition, mode, seed)?))?,
    };
    Ok(LmLossEntry {
        mode,
        loss,
        delta: loss - vanilla,
    })
}

/// All three modes with a single vanilla pass.
pub fn amnesic_suite<F: Scalar>(
    model: &ModelParams<F>,
    partition: &HeadPartition,
    sequences: &[Vec<usize>],
    seed: u64,
) -> Result<Vec<LmLossEntry>> {
    check_partition(model, partition)?;
    let vanilla = corpus_loss(model, sequences, None)?;
    AmnesicMode::ALL
        .iter()
        .map(|&mode| {
            let loss = match mode {
                AmnesicMode::Vanilla => vanilla,
                _ => corpus_loss(model, sequences, Some(&amnesic_mask(partition, mode, seed)?))?,
            };
            Ok(LmLossEntry {
                mode,
                loss,
                delta: loss - vanilla,
            })
        })
        .collect()
}

fn check_partition<F: Scalar>(model: &ModelParams<F>, partition: &HeadPartition) -> Result<()> {
    let c = &model.config;
    if (partition.n_layers, partition.n_heads) != (c.n_layers, c.n_heads) {
        return Err(Error::Shape(format!(
            "partition is {}x{}, model has {}x{} heads",
            partition.n_layers, partition.n_heads, c.n_layers, c.n_heads
        )));
    }
    Ok(())
}

/// Retrains a prefix with only the heads in `mask` active and reports test
/// accuracy under the same mask.
pub fn masked_prefix_accuracy<F: Scalar>(
    model: &ModelParams<F>,
    train: &[PromptExample],
    test: &[PromptExample],
    verbalizer: &Verbalizer,
    config: &PrefixTrainConfig,
    mask: &HeadMask,
    seed: u64,
) -> Result<f64> {
    let (prefix, _) = train_prefix(model, train, verbalizer, config, Some(mask), seed)?;
    accuracy(model, Some(&prefix), test, verbalizer, Some(mask))
}

/// Accuracy with only the non-essential heads. A partition that keeps every
/// head leaves nothing to evaluate and is an error.
pub fn non_essential_accuracy<F: Scalar>(
    model: &ModelParams<F>,
    partition: &HeadPartition,
    train: &[PromptExample],
    test: &[PromptExample],
    verbalizer: &Verbalizer,
    config: &PrefixTrainConfig,
    seed: u64,
) -> Result<f64> {
    check_partition(model, partition)?;
    if partition.non_essential().is_empty() {
        return Err(Error::Empty("non-essential head set"));
    }
    masked_prefix_accuracy(model, train, test, verbalizer, config, &partition.non_essential_mask(), seed)
}

pub fn essential_accuracy<F: Scalar>(
    model: &ModelParams<F>,
    partition: &HeadPartition,
    train: &[PromptExample],
    test: &[PromptExample],
    verbalizer: &Verbalizer,
    config: &PrefixTrainConfig,
    seed: u64,
) -> Result<f64> {
    check_partition(model, partition)?;
    masked_prefix_accuracy(model, train, test, verbalizer, config, &partition.essential_mask(), seed)
}

pub const REPORT_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelKind {
    Pretrained,
    Random,
}

/// Per-seed measurements. Accuracies are percentages.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedResult {
    pub seed: u64,
    pub accuracy: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub control_accuracy: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub layer_distribution: Option<LayerDistribution>,
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub lm_loss: Vec<LmLossEntry>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub essential_accuracy: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub non_essential_accuracy: Option<f64>,
}

/// Seed-averaged results of one (task, method, model kind) run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub schema_version: u32,
    pub task: String,
    pub method: String,
    pub model_kind: ModelKind,
    pub majority: f64,
    pub chance: f64,
    pub accuracy: f64,
    pub control_accuracy: Option<f64>,
    pub delta: Option<f64>,
    pub center_of_gravity: Option<f64>,
    pub layer_distribution: Option<LayerDistribution>,
    pub lm_loss: Vec<LmLossEntry>,
    pub essential_accuracy: Option<f64>,
    pub non_essential_accuracy: Option<f64>,
    pub seeds: Vec<u64>,
    pub per_seed: Vec<SeedResult>,
}

fn mean(xs: impl Iterator<Item = f64>) -> Option<f64> {
    let v: Vec<f64> = xs.collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

/// Mean of an optional per-seed field, present only if every seed has it.
fn mean_opt(per_seed: &[SeedResult], f: impl Fn(&SeedResult) -> Option<f64>) -> Option<f64> {
    let vals: Option<Vec<f64>> = per_seed.iter().map(&f).collect();
    vals.and_then(|v| mean(v.into_iter()))
}

impl ExperimentReport {
    /// Averages `per_seed` arithmetically. Percentages are rounded to two
    /// decimals; Δ is the difference of the rounded means.
    pub fn aggregate(
        task: &str,
        method: &str,
        model_kind: ModelKind,
        majority: f64,
        chance: f64,
        per_seed: Vec<SeedResult>,
    ) -> Result<Self> {
        if per_seed.is_empty() {
            return Err(Error::Empty("seed list"));
        }
        let accuracy = round2(mean(per_seed.iter().map(|s| s.accuracy)).expect("non-empty"));
        let control_accuracy = mean_opt(&per_seed, |s| s.control_accuracy).map(round2);
        let delta = control_accuracy.map(|c| selectivity_delta(accuracy, c)).transpose()?;
        let dists: Option<Vec<LayerDistribution>> = per_seed.iter().map(|s| s.layer_distribution.clone()).collect();
        let layer_distribution = dists.map(|d| LayerDistribution::average(&d)).transpose()?;
        let center_of_gravity = layer_distribution.as_ref().map(LayerDistribution::center_of_gravity);
        let mut lm_loss = Vec::new();
        if per_seed.iter().all(|s| !s.lm_loss.is_empty()) {
            let mut by_mode: BTreeMap<&str, (AmnesicMode, Vec<&LmLossEntry>)> = BTreeMap::new();
            for e in per_seed.iter().flat_map(|s| &s.lm_loss) {
                by_mode.entry(e.mode.name()).or_insert((e.mode, Vec::new())).1.push(e);
            }
            for mode in AmnesicMode::ALL {
                if let Some((_, entries)) = by_mode.get(mode.name()) {
                    lm_loss.push(LmLossEntry {
                        mode,
                        loss: mean(entries.iter().map(|e| e.loss)).expect("non-empty"),
                        delta: mean(entries.iter().map(|e| e.delta)).expect("non-empty"),
                    });
                }
            }
        }
        let report = Self {
            schema_version: REPORT_SCHEMA_VERSION,
            task: task.into(),
            method: method.into(),
            model_kind,
            majority: round2(majority),
            chance: round2(chance),
            accuracy,
            control_accuracy,
            delta,
            center_of_gravity,
            layer_distribution,
            lm_loss,
            essential_accuracy: mean_opt(&per_seed, |s| s.essential_accuracy).map(round2),
            non_essential_accuracy: mean_opt(&per_seed, |s| s.non_essential_accuracy).map(round2),
            seeds: per_seed.iter().map(|s| s.seed).collect(),
            per_seed,
        };
        report.validate()?;
        Ok(report)
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != REPORT_SCHEMA_VERSION {
            return Err(Error::SchemaVersion {
                expected: REPORT_SCHEMA_VERSION,
                found: self.schema_version,
            });
        }
        if let (Some(c), Some(d)) = (self.control_accuracy, self.delta) {
            if (self.accuracy - c - d).abs() > 1e-9 {
                return Err(Error::Invariant(format!(
                    "Δ {d} differs from {} - {c}",
                    self.accuracy
                )));
            }
        }
        if let Some(d) = &self.layer_distribution {
            d.validate()?;
        }
        Ok(())
    }
}
