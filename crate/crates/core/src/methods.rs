//! Probing methods behind one interface, looked up by name.
//!
//! `pp` learns a prefix and reads the label off the verbalizer, `dp-lr` and
//! `dp-mlp` train diagnostic classifiers on frozen activations. With gate
//! settings present each method is trained jointly with a K-head mask and
//! evaluated under the resulting essential heads.

use crate::analysis::{DistributionSource, LayerDistribution};
use crate::data::tokenizer::Tokenizer;
use crate::data::Dataset;
use crate::diagnostic::{masked_probe_accuracy, probe_accuracy, train_probe, ProbeConfig, ProbeKind};
use crate::error::{Error, Result};
use crate::lm::ModelParams;
use crate::prompting::{accuracy, extend_vocabulary, prompt_examples, train_prefix, PrefixTrainConfig};
use crate::pruning::{
    essential_partition, train_joint, train_joint_probe, GateTrainConfig, HeadPartition, JointTrainConfig,
};
use crate::tensor::Scalar;

pub const METHOD_NAMES: [&str; 3] = ["pp", "dp-lr", "dp-mlp"];

#[derive(Debug, Clone, Default, PartialEq)]
pub struct MethodSettings {
    pub prefix: PrefixTrainConfig,
    pub probe: ProbeConfig,
    /// Joint head pruning; `None` trains on the full model.
    pub gates: Option<GateTrainConfig>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MethodOutcome {
    /// Test accuracy in percent, under the essential mask when pruned.
    pub accuracy: f64,
    pub partition: Option<HeadPartition>,
    pub layer_distribution: Option<LayerDistribution>,
}

pub trait ProbingMethod<F: Scalar>: Send + Sync {
    fn name(&self) -> &'static str;

    /// Whether a prefix length applies to this method.
    fn uses_prefix(&self) -> bool;

    /// Trains on `train` and scores `test`. `tokenizer` must match the
    /// model vocabulary; it is not modified.
    fn run(
        &self,
        model: &ModelParams<F>,
        tokenizer: &Tokenizer,
        train: &Dataset,
        test: &Dataset,
        settings: &MethodSettings,
        seed: u64,
    ) -> Result<MethodOutcome>;
}

/// Probing via prompting.
#[derive(Debug, Clone, Copy, Default)]
pub struct PromptProbe;

/// A diagnostic classifier of the given kind.
#[derive(Debug, Clone, Copy)]
pub struct DiagnosticProbe(pub ProbeKind);

impl<F: Scalar> ProbingMethod<F> for PromptProbe {
    fn name(&self) -> &'static str {
        "pp"
    }

    fn uses_prefix(&self) -> bool {
        true
    }

    fn run(
        &self,
        model: &ModelParams<F>,
        tokenizer: &Tokenizer,
        train: &Dataset,
        test: &Dataset,
        settings: &MethodSettings,
        seed: u64,
    ) -> Result<MethodOutcome> {
        let mut tok = tokenizer.clone();
        let (ext, vb) = extend_vocabulary(model, &mut tok, &train.labels, seed)?;
        let tr = prompt_examples(train, &vb)?;
        let te = prompt_examples(test, &vb)?;
        match &settings.gates {
            None => {
                let (prefix, _) = train_prefix(&ext, &tr, &vb, &settings.prefix, None, seed)?;
                Ok(MethodOutcome {
                    accuracy: accuracy(&ext, Some(&prefix), &te, &vb, None)?,
                    partition: None,
                    layer_distribution: None,
                })
            }
            Some(gates) => {
                let config = JointTrainConfig {
                    prefix: settings.prefix.clone(),
                    gates: gates.clone(),
                };
                let out = train_joint(&ext, &tr, &vb, &config, seed)?;
                let partition = essential_partition(&out.gates, gates.k)?;
                let mask = partition.essential_mask();
                Ok(MethodOutcome {
                    accuracy: accuracy(&ext, Some(&out.prefix), &te, &vb, Some(&mask))?,
                    layer_distribution: Some(LayerDistribution::from_partition(&partition, DistributionSource::PpHeads)?),
                    partition: Some(partition),
                })
            }
        }
    }
}

impl<F: Scalar> ProbingMethod<F> for DiagnosticProbe {
    fn name(&self) -> &'static str {
        match self.0 {
            ProbeKind::Lr => "dp-lr",
            ProbeKind::Mlp => "dp-mlp",
        }
    }

    fn uses_prefix(&self) -> bool {
        false
    }

    fn run(
        &self,
        model: &ModelParams<F>,
        _tokenizer: &Tokenizer,
        train: &Dataset,
        test: &Dataset,
        settings: &MethodSettings,
        seed: u64,
    ) -> Result<MethodOutcome> {
        let kind = self.0;
        let (probe, partition, acc) = match &settings.gates {
            None => {
                let (probe, _) = train_probe(kind, model, train, &settings.probe, seed)?;
                let acc = probe_accuracy(&probe, model, test)?;
                (probe, None, acc)
            }
            Some(gates) => {
                let out = train_joint_probe(kind, model, train, &settings.probe, gates, seed)?;
                let partition = essential_partition(&out.gates, gates.k)?;
                let acc = masked_probe_accuracy(&out.probe, model, test, Some(&partition.essential_mask()))?;
                (out.probe, Some(partition), acc)
            }
        };
        // The MLP probe's own layer weights describe it even when pruned.
        let layer_distribution = match (kind, &partition) {
            (ProbeKind::Mlp, _) => probe.mix_weights().map(|w| LayerDistribution::from_mix(&w)).transpose()?,
            (ProbeKind::Lr, Some(p)) => Some(LayerDistribution::from_partition(p, DistributionSource::LrHeads)?),
            (ProbeKind::Lr, None) => None,
        };
        Ok(MethodOutcome {
            accuracy: acc,
            partition,
            layer_distribution,
        })
    }
}

pub fn method_by_name<F: Scalar>(name: &str) -> Result<Box<dyn ProbingMethod<F>>> {
    match name {
        "pp" => Ok(Box::new(PromptProbe)),
        "dp-lr" => Ok(Box::new(DiagnosticProbe(ProbeKind::Lr))),
        "dp-mlp" => Ok(Box::new(DiagnosticProbe(ProbeKind::Mlp))),
        _ => Err(Error::UnknownName {
            kind: "method",
            name: name.into(),
            available: METHOD_NAMES.join(", "),
        }),
    }
}
