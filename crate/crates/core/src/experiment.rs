//! Experiment configuration and multi-seed runs.
//!
//! A config names a task, a method, where the model comes from and which
//! seeds to run. Seeds run in parallel; results are gathered in seed order
//! so the report does not depend on scheduling.

use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::analysis::{
    amnesic_suite, chance_baseline, essential_accuracy, majority_baseline, make_control_task, non_essential_accuracy,
    ExperimentReport, ModelKind, SeedResult,
};
use crate::container::read_header;
use crate::data::synthetic::{generate_synthetic, SyntheticConfig};
use crate::data::{load_edge_probing_jsonl, Dataset, Tokenizer};
use crate::diagnostic::ProbeConfig;
use crate::error::{Error, Result};
use crate::lm::{lm_windows, load_weights, pretrain, ModelParams, PretrainConfig, TransformerConfig};
use crate::methods::{method_by_name, MethodSettings, METHOD_NAMES};
use crate::optim::AdamConfig;
use crate::prompting::{extend_vocabulary, prompt_examples, LossScope, PrefixTrainConfig};
use crate::pruning::{GateTrainConfig, PartitionFile};
use crate::tensor::{DType, Scalar};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub task: String,
    pub method: String,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default = "default_out")]
    pub out: PathBuf,
    /// Prefix length; `pp` only.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prefix_len: Option<usize>,
    /// Number of heads to keep. Setting it turns on joint pruning.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub keep_heads: Option<usize>,
    /// Share of records held out when the data has no separate test file.
    #[serde(default = "default_test_fraction")]
    pub test_fraction: f64,
    #[serde(default)]
    pub split_seed: u64,
    /// Also train on the control task. Unset means "when the task allows".
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub control: Option<bool>,
    pub model: ModelSource,
    #[serde(default)]
    pub data: DataSource,
    #[serde(default)]
    pub transformer: ToyTransformer,
    #[serde(default)]
    pub pretrain: PretrainSettings,
    #[serde(default)]
    pub prefix: PrefixSettings,
    #[serde(default)]
    pub probe: ProbeConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gates: Option<GateSettings>,
}

fn default_seeds() -> Vec<u64> {
    vec![1, 2, 3, 4, 5]
}

fn default_out() -> PathBuf {
    PathBuf::from("runs")
}

fn default_test_fraction() -> f64 {
    0.25
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "kebab-case", deny_unknown_fields)]
pub enum ModelSource {
    /// A toy model pretrained on the synthetic corpus.
    Synthetic {
        #[serde(default)]
        seed: u64,
    },
    /// Untrained weights.
    Random {
        #[serde(default)]
        seed: u64,
    },
    /// A tensor container with an embedded model config.
    Weights { path: PathBuf },
}

impl ModelSource {
    pub fn kind(&self) -> ModelKind {
        match self {
            ModelSource::Random { .. } => ModelKind::Random,
            _ => ModelKind::Pretrained,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum DataSource {
    Synthetic {
        #[serde(default)]
        seed: u64,
        #[serde(default)]
        config: SyntheticConfig,
    },
    Jsonl {
        train: PathBuf,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        test: Option<PathBuf>,
        tokenizer: TokenizerSource,
        /// Plain text, one passage per line, for language-model losses.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        corpus: Option<PathBuf>,
    },
}

impl Default for DataSource {
    fn default() -> Self {
        DataSource::Synthetic {
            seed: 0,
            config: SyntheticConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum TokenizerSource {
    /// One token per line.
    Whitespace { vocab: PathBuf },
    BytePair { vocab: PathBuf, merges: PathBuf },
}

impl TokenizerSource {
    pub fn load(&self) -> Result<Tokenizer> {
        match self {
            TokenizerSource::Whitespace { vocab } => Tokenizer::load_whitespace(vocab),
            TokenizerSource::BytePair { vocab, merges } => Tokenizer::load_byte_pair(vocab, merges),
        }
    }
}

/// Shape of models built here; the vocabulary comes from the tokenizer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ToyTransformer {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub max_positions: usize,
    pub float_width: u32,
}

impl Default for ToyTransformer {
    fn default() -> Self {
        Self {
            n_layers: 4,
            n_heads: 4,
            d_model: 32,
            d_ff: 64,
            max_positions: 32,
            float_width: 32,
        }
    }
}

impl ToyTransformer {
    pub fn config(&self, vocab_size: usize) -> Result<TransformerConfig> {
        if self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::Config(format!(
                "transformer.d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        let c = TransformerConfig {
            n_layers: self.n_layers,
            n_heads: self.n_heads,
            d_model: self.d_model,
            d_head: self.d_model / self.n_heads,
            d_ff: self.d_ff,
            vocab_size,
            max_positions: self.max_positions,
            float_width: self.float_width,
        };
        c.validate()?;
        Ok(c)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainSettings {
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: AdamConfig,
}

impl Default for PretrainSettings {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch_size: 16,
            optimizer: AdamConfig::with_lr(3e-3),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PrefixSettings {
    pub optimizer: AdamConfig,
    pub batch_size: usize,
    pub epochs: usize,
    pub init_std: f64,
    pub loss: LossScope,
}

impl Default for PrefixSettings {
    fn default() -> Self {
        let p = PrefixTrainConfig::default();
        Self {
            optimizer: p.optimizer,
            batch_size: p.batch_size,
            epochs: p.epochs,
            init_std: p.init_std,
            loss: p.loss,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GateSettings {
    pub gate_lr: f64,
    pub temperature_start: f64,
    pub temperature_end: f64,
    pub straight_through: bool,
}

impl Default for GateSettings {
    fn default() -> Self {
        let g = GateTrainConfig::default();
        Self {
            gate_lr: g.gate_lr,
            temperature_start: g.temperature_start,
            temperature_end: g.temperature_end,
            straight_through: g.straight_through,
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Field-level checks that need no files.
    pub fn validate(&self) -> Result<()> {
        if !METHOD_NAMES.contains(&self.method.as_str()) {
            return Err(Error::Config(format!(
                "method: unknown value {:?}; expected one of {}",
                self.method,
                METHOD_NAMES.join(", ")
            )));
        }
        if self.task.is_empty() {
            return Err(Error::Config("task: must not be empty".into()));
        }
        if self.prefix_len.is_some() && self.method != "pp" {
            return Err(Error::Config(format!(
                "prefix_len: only applies to method pp, not {}",
                self.method
            )));
        }
        match self.keep_heads {
            Some(0) => return Err(Error::Config("keep_heads: must be at least 1".into())),
            None if self.gates.is_some() => {
                return Err(Error::Config("gates: pruning settings given without keep_heads".into()))
            }
            _ => {}
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("seeds: at least one seed is required".into()));
        }
        let mut sorted = self.seeds.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != self.seeds.len() {
            return Err(Error::Config("seeds: duplicate seed".into()));
        }
        let needs_split = !matches!(&self.data, DataSource::Jsonl { test: Some(_), .. });
        if needs_split && !(self.test_fraction > 0.0 && self.test_fraction < 1.0) {
            return Err(Error::Config(format!(
                "test_fraction: {} outside (0, 1)",
                self.test_fraction
            )));
        }
        if matches!(self.model, ModelSource::Weights { .. }) && matches!(self.data, DataSource::Synthetic { .. }) {
            return Err(Error::Config(
                "data: pretrained weights need a tokenizer, so use jsonl data".into(),
            ));
        }
        if let DataSource::Synthetic { config, .. } = &self.data {
            config.validate()?;
        }
        Ok(())
    }

    pub fn settings(&self) -> MethodSettings {
        let p = &self.prefix;
        MethodSettings {
            prefix: PrefixTrainConfig {
                prefix_len: self.prefix_len.unwrap_or(PrefixTrainConfig::default().prefix_len),
                optimizer: p.optimizer,
                batch_size: p.batch_size,
                epochs: p.epochs,
                init_std: p.init_std,
                loss: p.loss,
            },
            probe: self.probe.clone(),
            gates: self.keep_heads.map(|k| {
                let g = self.gates.clone().unwrap_or_default();
                GateTrainConfig {
                    k,
                    gate_lr: g.gate_lr,
                    temperature_start: g.temperature_start,
                    temperature_end: g.temperature_end,
                    straight_through: g.straight_through,
                }
            }),
        }
    }
}

/// Train and test splits with their tokenizer and optional LM corpus.
#[derive(Debug, Clone)]
pub struct TaskData {
    pub tokenizer: Tokenizer,
    pub train: Dataset,
    pub test: Dataset,
    /// Pretraining stream of the synthetic language.
    pub corpus: Option<Vec<usize>>,
}

/// Loads or generates the task data named by `config`.
pub fn load_task_data(config: &ExperimentConfig) -> Result<TaskData> {
    match &config.data {
        DataSource::Synthetic { seed, config: sc } => {
            let sc = SyntheticConfig {
                task: config.task.clone(),
                ..sc.clone()
            };
            let task = generate_synthetic(&sc, *seed)?;
            let (train, test) = task.dataset.split(config.test_fraction, config.split_seed)?;
            Ok(TaskData {
                corpus: Some(task.corpus_stream()?),
                tokenizer: task.tokenizer,
                train,
                test,
            })
        }
        DataSource::Jsonl {
            train,
            test,
            tokenizer,
            corpus,
        } => {
            let tokenizer = tokenizer.load()?;
            let full = load_edge_probing_jsonl(train, &config.task, &tokenizer)?;
            let (train, test) = match test {
                Some(path) => {
                    let test = load_edge_probing_jsonl(path, &config.task, &tokenizer)?;
                    // One inventory across both files, train labels first.
                    let mut labels = full.labels.clone();
                    for l in &test.labels {
                        if !labels.contains(l) {
                            labels.push(l.clone());
                        }
                    }
                    (full.with_labels(labels.clone())?, test.with_labels(labels)?)
                }
                None => full.split(config.test_fraction, config.split_seed)?,
            };
            let corpus = match corpus {
                Some(path) => Some(encode_corpus(&tokenizer, &fs::read_to_string(path)?)?),
                None => None,
            };
            Ok(TaskData {
                tokenizer,
                train,
                test,
                corpus,
            })
        }
    }
}

/// Encodes non-empty lines and joins them with the EOS symbol when the
/// tokenizer has one.
pub fn encode_corpus(tokenizer: &Tokenizer, text: &str) -> Result<Vec<usize>> {
    let eos = tokenizer.special(crate::data::tokenizer::EOS);
    let mut out = Vec::new();
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        out.extend(tokenizer.encode(line)?);
        out.extend(eos);
    }
    if out.is_empty() {
        return Err(Error::Empty("corpus"));
    }
    Ok(out)
}

/// Builds, pretrains or loads the model for `config`.
pub fn build_model<F: Scalar>(config: &ExperimentConfig, data: &TaskData) -> Result<ModelParams<F>> {
    match &config.model {
        ModelSource::Weights { path } => {
            let (mc, model) = load_weights::<F>(path)?;
            if mc.vocab_size != data.tokenizer.len() {
                return Err(Error::Config(format!(
                    "model.path: vocabulary of {} does not match the tokenizer's {}",
                    mc.vocab_size,
                    data.tokenizer.len()
                )));
            }
            Ok(model)
        }
        ModelSource::Random { seed } => {
            ModelParams::init_random(&config.transformer.config(data.tokenizer.len())?, *seed)
        }
        ModelSource::Synthetic { seed } => {
            let stream = data
                .corpus
                .as_ref()
                .ok_or_else(|| Error::Config("model: synthetic pretraining needs a corpus".into()))?;
            let mc = config.transformer.config(data.tokenizer.len())?;
            let mut model = ModelParams::init_random(&mc, *seed)?;
            let p = &config.pretrain;
            let pc = PretrainConfig {
                epochs: p.epochs,
                batch_size: p.batch_size,
                optimizer: p.optimizer,
                seed: *seed,
            };
            pretrain(&mut model, &lm_windows(stream, mc.max_positions), &pc, None)?;
            Ok(model)
        }
    }
}

/// Float width the run will use.
pub fn float_width(config: &ExperimentConfig) -> Result<u32> {
    match &config.model {
        ModelSource::Weights { path } => Ok(match read_header(path)?.dtype {
            DType::F32 => 32,
            DType::F64 => 64,
        }),
        _ => Ok(config.transformer.float_width),
    }
}

/// The report plus per-seed partitions of a pruned run.
#[derive(Debug, Clone, PartialEq)]
pub struct RunOutput {
    pub report: ExperimentReport,
    pub partitions: Vec<PartitionFile>,
}

/// Runs every seed of `config`.
pub fn run_experiment(config: &ExperimentConfig) -> Result<RunOutput> {
    config.validate()?;
    let data = load_task_data(config)?;
    match float_width(config)? {
        64 => run_with::<f64>(config, &data),
        _ => run_with::<f32>(config, &data),
    }
}

pub fn run_with<F: Scalar>(config: &ExperimentConfig, data: &TaskData) -> Result<RunOutput> {
    config.validate()?;
    let model = build_model::<F>(config, data)?;
    run_on_model(config, data, &model)
}

struct SeedRun {
    result: SeedResult,
    partition: Option<PartitionFile>,
}

/// Runs every seed on an already built model.
pub fn run_on_model<F: Scalar>(config: &ExperimentConfig, data: &TaskData, model: &ModelParams<F>) -> Result<RunOutput> {
    config.validate()?;
    let mc = &model.config;
    if let Some(k) = config.keep_heads {
        if k > mc.total_heads() {
            return Err(Error::Config(format!(
                "keep_heads: {k} exceeds the model's {} heads",
                mc.total_heads()
            )));
        }
    }
    let method = method_by_name::<F>(&config.method)?;
    let settings = config.settings();
    let control_ok = control_eligible(&data.train) && control_eligible(&data.test);
    let control = match config.control {
        Some(true) if !control_ok => {
            return Err(Error::Unsupported(
                "control: the task needs unary single-word spans".into(),
            ))
        }
        Some(c) => c,
        None => control_ok,
    };
    let windows = data.corpus.as_ref().map(|s| lm_windows(s, mc.max_positions));

    let runs = config
        .seeds
        .par_iter()
        .map(|&seed| -> Result<SeedRun> {
            let outcome = method.run(model, &data.tokenizer, &data.train, &data.test, &settings, seed)?;
            let control_accuracy = if control {
                let ctrain = make_control_task(&data.train, seed)?;
                let ctest = make_control_task(&data.test, seed)?;
                Some(method.run(model, &data.tokenizer, &ctrain, &ctest, &settings, seed)?.accuracy)
            } else {
                None
            };
            let mut result = SeedResult {
                seed,
                accuracy: outcome.accuracy,
                control_accuracy,
                layer_distribution: outcome.layer_distribution,
                lm_loss: Vec::new(),
                essential_accuracy: None,
                non_essential_accuracy: None,
            };
            if let Some(p) = &outcome.partition {
                if let Some(w) = &windows {
                    result.lm_loss = amnesic_suite(model, p, w, seed)?;
                }
                if method.uses_prefix() {
                    let mut tok = data.tokenizer.clone();
                    let (ext, vb) = extend_vocabulary(model, &mut tok, &data.train.labels, seed)?;
                    let tr = prompt_examples(&data.train, &vb)?;
                    let te = prompt_examples(&data.test, &vb)?;
                    result.essential_accuracy =
                        Some(essential_accuracy(&ext, p, &tr, &te, &vb, &settings.prefix, seed)?);
                    if !p.non_essential().is_empty() {
                        result.non_essential_accuracy =
                            Some(non_essential_accuracy(&ext, p, &tr, &te, &vb, &settings.prefix, seed)?);
                    }
                }
            }
            Ok(SeedRun {
                result,
                partition: outcome.partition.map(|p| p.to_file(&config.task, &[seed])),
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let majority = majority_baseline(&data.train, &data.test)?;
    let chance = chance_baseline(data.train.labels.len())?;
    let mut partitions = Vec::new();
    let mut per_seed = Vec::new();
    for r in runs {
        per_seed.push(r.result);
        partitions.extend(r.partition);
    }
    let report = ExperimentReport::aggregate(
        &config.task,
        &config.method,
        config.model.kind(),
        majority,
        chance,
        per_seed,
    )?;
    Ok(RunOutput { report, partitions })
}

fn control_eligible(ds: &Dataset) -> bool {
    !ds.is_empty() && ds.examples.iter().all(|e| e.span2.is_none() && e.word_span1.len() == 1)
}
