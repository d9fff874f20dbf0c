//! A toy language whose tokens each carry a latent class.
//!
//! Every word belongs to one of `C` classes. The class of a word is fixed by
//! the class of the word two positions back through a seeded permutation, so
//! a model can only predict well if it moves information from the previous
//! token forward. After a sentence boundary (or at the start) the class is
//! drawn uniformly. Words within a class are uniform.

use std::collections::HashMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::tokenizer::{self, Tokenizer};
use super::{Dataset, EdgeProbingExample, Span};
use crate::error::{Error, Result};

pub const BOUNDARY: &str = "<eot>";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticConfig {
    pub n_classes: usize,
    pub words_per_class: usize,
    /// Share of probing examples carrying the majority class (class 0).
    pub skew: f64,
    pub corpus_sentences: usize,
    pub probe_examples: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub task: String,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            n_classes: 4,
            words_per_class: 12,
            skew: 0.5,
            corpus_sentences: 4000,
            probe_examples: 1200,
            min_len: 4,
            max_len: 10,
            task: "synthetic".into(),
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_classes == 0 || self.words_per_class == 0 {
            return Err(Error::Config(
                "n_classes and words_per_class must be positive".into(),
            ));
        }
        if !(self.skew > 0.0 && self.skew <= 1.0) {
            return Err(Error::Config(format!("skew {} outside (0, 1]", self.skew)));
        }
        let floor = 1.0 / self.n_classes as f64;
        if self.skew < floor - 0.01 {
            return Err(Error::Config(format!(
                "skew {} is below the uniform share {floor:.4} of {} classes",
                self.skew, self.n_classes
            )));
        }
        if self.n_classes == 1 && self.skew < 1.0 {
            return Err(Error::Config("a single class needs skew 1".into()));
        }
        if self.min_len == 0 || self.min_len > self.max_len {
            return Err(Error::Config("need 0 < min_len <= max_len".into()));
        }
        if self.probe_examples == 0 {
            return Err(Error::Config("probe_examples must be positive".into()));
        }
        Ok(())
    }
}

/// Generated language, corpus and probing dataset.
#[derive(Debug, Clone)]
pub struct SyntheticTask {
    pub config: SyntheticConfig,
    /// Whitespace tokenizer; id 0 is the boundary symbol, registered as EOS.
    pub tokenizer: Tokenizer,
    /// Class of each word id (`None` for the boundary).
    pub classes: Vec<Option<usize>>,
    /// Class permutation driving the language.
    pub successor: Vec<usize>,
    /// Pretraining sentences, in stream order.
    pub corpus: Vec<String>,
    pub dataset: Dataset,
}

pub fn class_label(c: usize) -> String {
    format!("c{c}")
}

fn word(c: usize, k: usize) -> String {
    format!("c{c}w{k:02}")
}

struct Generator<'a> {
    config: &'a SyntheticConfig,
    successor: &'a [usize],
    rng: ChaCha8Rng,
}

impl Generator<'_> {
    /// Next class given the class two positions back (if any).
    fn next_class(&mut self, two_back: Option<usize>) -> usize {
        match two_back {
            Some(c) => self.successor[c],
            None => self.rng.random_range(0..self.config.n_classes),
        }
    }

    /// A sentence as `(class, word index)` pairs, continuing from `history`
    /// (the classes of the last two stream positions, `None` at boundaries).
    fn sentence(&mut self, mut history: [Option<usize>; 2]) -> Vec<(usize, usize)> {
        let len = self.rng.random_range(self.config.min_len..=self.config.max_len);
        let mut out = Vec::with_capacity(len);
        for _ in 0..len {
            let c = self.next_class(history[0]);
            let k = self.rng.random_range(0..self.config.words_per_class);
            out.push((c, k));
            history = [history[1], Some(c)];
        }
        out
    }
}

/// Builds the language, a pretraining corpus and a skewed probing dataset.
pub fn generate_synthetic(config: &SyntheticConfig, seed: u64) -> Result<SyntheticTask> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut successor: Vec<usize> = (0..config.n_classes).collect();
    successor.shuffle(&mut rng);

    let mut vocab = vec![BOUNDARY.to_string()];
    let mut classes = vec![None];
    for c in 0..config.n_classes {
        for k in 0..config.words_per_class {
            vocab.push(word(c, k));
            classes.push(Some(c));
        }
    }
    let mut tokenizer = Tokenizer::whitespace(vocab)?;
    tokenizer.add_special(tokenizer::EOS, BOUNDARY);

    let render = |s: &[(usize, usize)]| {
        s.iter()
            .map(|&(c, k)| word(c, k))
            .collect::<Vec<_>>()
            .join(" ")
    };

    let mut gen = Generator {
        config,
        successor: &successor,
        rng: ChaCha8Rng::seed_from_u64(rng.random()),
    };
    // The boundary sits between sentences, so the first word of a sentence
    // depends on the last word of the previous one.
    let mut corpus = Vec::with_capacity(config.corpus_sentences);
    let mut last: Option<usize> = None;
    for _ in 0..config.corpus_sentences {
        let s = gen.sentence([last, None]);
        last = s.last().map(|&(c, _)| c);
        corpus.push(render(&s));
    }

    let mut quotas = label_quotas(config);
    quotas.shuffle(&mut gen.rng);
    let mut examples = Vec::with_capacity(quotas.len());
    for (record, &label) in quotas.iter().enumerate() {
        let (sentence, pos) = loop {
            let s = gen.sentence([None, None]);
            let hits: Vec<usize> = (0..s.len()).filter(|&i| s[i].0 == label).collect();
            if !hits.is_empty() {
                let pos = hits[gen.rng.random_range(0..hits.len())];
                break (s, pos);
            }
        };
        let text = render(&sentence);
        let tokens = tokenizer.encode(&text)?;
        let span = Span::new(pos, pos + 1);
        examples.push(EdgeProbingExample {
            text,
            tokens,
            span1: span,
            span2: None,
            word_span1: span,
            word_span2: None,
            label: class_label(label),
            task: config.task.clone(),
            record,
        });
    }
    let labels = (0..config.n_classes).map(class_label).collect();
    let dataset = Dataset::new(config.task.clone(), examples).with_labels(labels)?;
    Ok(SyntheticTask {
        config: config.clone(),
        tokenizer,
        classes,
        successor,
        corpus,
        dataset,
    })
}

/// Class 0 gets `round(skew · n)` examples; the rest are spread evenly.
fn label_quotas(config: &SyntheticConfig) -> Vec<usize> {
    let n = config.probe_examples;
    let major = ((config.skew * n as f64).round() as usize).min(n);
    let mut out = vec![0; major];
    let others = config.n_classes - 1;
    for i in 0..n - major {
        out.push(1 + i % others.max(1));
    }
    out
}

impl SyntheticTask {
    /// Corpus token ids with the boundary symbol before every sentence.
    pub fn corpus_stream(&self) -> Result<Vec<usize>> {
        let eos = self.tokenizer.special(tokenizer::EOS).expect("boundary registered");
        let mut out = Vec::new();
        for s in &self.corpus {
            out.push(eos);
            out.extend(self.tokenizer.encode(s)?);
        }
        Ok(out)
    }

    /// The class a word id carries.
    pub fn class_of(&self, id: usize) -> Option<usize> {
        self.classes.get(id).copied().flatten()
    }
}

/// Entropy in nats of the unigram distribution of `tokens`.
pub fn unigram_entropy(tokens: &[usize]) -> f64 {
    let mut counts: HashMap<usize, usize> = HashMap::new();
    for &t in tokens {
        *counts.entry(t).or_insert(0) += 1;
    }
    let n = tokens.len() as f64;
    let mut ids: Vec<_> = counts.into_iter().collect();
    ids.sort_unstable();
    ids.iter()
        .map(|&(_, c)| {
            let p = c as f64 / n;
            -p * p.ln()
        })
        .sum()
}
