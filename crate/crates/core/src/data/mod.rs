//! Edge-probing datasets: span-labelled sentences, their JSONL interchange
//! format, span resolution against a tokenizer, and a synthetic language.

pub mod synthetic;
pub mod tokenizer;

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
pub use tokenizer::{Encoding, Tokenizer, TokenizerKind};

/// Half-open interval `[start, end)`, serialized as `[start, end]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(from = "[usize; 2]", into = "[usize; 2]")]
pub struct Span {
    pub start: usize,
    pub end: usize,
}

impl Span {
    pub fn new(start: usize, end: usize) -> Self {
        Self { start, end }
    }

    pub fn len(&self) -> usize {
        self.end.saturating_sub(self.start)
    }

    pub fn is_empty(&self) -> bool {
        self.end <= self.start
    }

    /// `0 <= start < end <= limit`.
    pub fn check(&self, limit: usize) -> Result<()> {
        if self.start < self.end && self.end <= limit {
            Ok(())
        } else {
            Err(Error::Span(format!(
                "[{}, {}) is empty or exceeds length {limit}",
                self.start, self.end
            )))
        }
    }
}

impl From<[usize; 2]> for Span {
    fn from([start, end]: [usize; 2]) -> Self {
        Self { start, end }
    }
}

impl From<Span> for [usize; 2] {
    fn from(s: Span) -> Self {
        [s.start, s.end]
    }
}

impl fmt::Display for Span {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[{}, {})", self.start, self.end)
    }
}

/// One labelled span (or span pair) in a sentence.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EdgeProbingExample {
    pub text: String,
    /// Token ids of `text` under the active tokenizer.
    pub tokens: Vec<usize>,
    /// Spans in token units.
    pub span1: Span,
    pub span2: Option<Span>,
    /// Span1 in whitespace-word units, as written in the source record.
    pub word_span1: Span,
    pub word_span2: Option<Span>,
    pub label: String,
    pub task: String,
    /// Source record; examples from one record always share a split.
    pub record: usize,
}

impl EdgeProbingExample {
    /// Whitespace words covered by `word_span1`, joined by single spaces.
    pub fn span1_words(&self) -> String {
        self.text
            .split_whitespace()
            .skip(self.word_span1.start)
            .take(self.word_span1.len())
            .collect::<Vec<_>>()
            .join(" ")
    }

    pub fn span1_tokens(&self) -> &[usize] {
        &self.tokens[self.span1.start..self.span1.end]
    }

    pub fn span2_tokens(&self) -> Option<&[usize]> {
        self.span2.map(|s| &self.tokens[s.start..s.end])
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub task: String,
    /// Label inventory in first-seen order.
    pub labels: Vec<String>,
    pub examples: Vec<EdgeProbingExample>,
}

impl Dataset {
    /// Collects the label inventory from `examples` in first-seen order.
    pub fn new(task: impl Into<String>, examples: Vec<EdgeProbingExample>) -> Self {
        let mut labels: Vec<String> = Vec::new();
        for ex in &examples {
            if !labels.contains(&ex.label) {
                labels.push(ex.label.clone());
            }
        }
        Self {
            task: task.into(),
            labels,
            examples,
        }
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    /// True when examples carry a second span.
    pub fn is_binary(&self) -> bool {
        self.examples.first().is_some_and(|e| e.span2.is_some())
    }

    pub fn label_index(&self, label: &str) -> Result<usize> {
        self.labels
            .iter()
            .position(|l| l == label)
            .ok_or_else(|| Error::UnknownLabel(label.to_string()))
    }

    /// Label indices of every example, in order.
    pub fn targets(&self) -> Result<Vec<usize>> {
        self.examples
            .iter()
            .map(|e| self.label_index(&e.label))
            .collect()
    }

    /// Example count per label, keyed by label.
    pub fn label_counts(&self) -> BTreeMap<String, usize> {
        let mut counts = BTreeMap::new();
        for e in &self.examples {
            *counts.entry(e.label.clone()).or_insert(0) += 1;
        }
        counts
    }

    /// Same examples with the label inventory replaced by `labels`
    /// (e.g. the union over splits). Fails if an example's label is missing.
    pub fn with_labels(mut self, labels: Vec<String>) -> Result<Self> {
        if let Some(e) = self.examples.iter().find(|e| !labels.contains(&e.label)) {
            return Err(Error::UnknownLabel(e.label.clone()));
        }
        self.labels = labels;
        Ok(self)
    }

    /// Splits by source record: a shuffled `test_fraction` of records goes to
    /// the second set. Both sets keep the full label inventory.
    pub fn split(&self, test_fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
        if !(0.0..1.0).contains(&test_fraction) {
            return Err(Error::Config(format!(
                "test_fraction must be in [0, 1), got {test_fraction}"
            )));
        }
        let mut records: Vec<usize> = self.examples.iter().map(|e| e.record).collect();
        records.sort_unstable();
        records.dedup();
        records.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let n_test = (records.len() as f64 * test_fraction).round() as usize;
        let test: HashSet<usize> = records[..n_test].iter().copied().collect();
        let (a, b): (Vec<_>, Vec<_>) = self
            .examples
            .iter()
            .cloned()
            .partition(|e| !test.contains(&e.record));
        let make = |examples| Dataset {
            task: self.task.clone(),
            labels: self.labels.clone(),
            examples,
        };
        Ok((make(a), make(b)))
    }

    /// Writes the dataset back as edge-probing JSONL, one line per record.
    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        let mut records: BTreeMap<usize, Record> = BTreeMap::new();
        for e in &self.examples {
            let rec = records.entry(e.record).or_insert_with(|| Record {
                text: e.text.clone(),
                targets: Vec::new(),
            });
            rec.targets.push(Target {
                span1: e.word_span1,
                span2: e.word_span2,
                label: e.label.clone(),
            });
        }
        let mut file = std::io::BufWriter::new(fs::File::create(path)?);
        for rec in records.values() {
            serde_json::to_writer(&mut file, rec)?;
            file.write_all(b"\n")?;
        }
        file.flush()?;
        Ok(())
    }
}

/// One JSONL line.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Record {
    pub text: String,
    pub targets: Vec<Target>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Target {
    pub span1: Span,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub span2: Option<Span>,
    pub label: String,
}

/// Smallest token interval covering the character range `[c0, c1)`.
pub fn resolve_spans(char_span: (usize, usize), offsets: &[(usize, usize)], text_len: usize) -> Result<Span> {
    let (c0, c1) = char_span;
    if c0 >= c1 || c1 > text_len {
        return Err(Error::Span(format!(
            "character span [{c0}, {c1}) is empty or beyond text of length {text_len}"
        )));
    }
    let start = offsets.iter().position(|&(_, e)| e > c0);
    let end = offsets.iter().rposition(|&(s, _)| s < c1);
    match (start, end) {
        (Some(s), Some(e)) if s <= e => Ok(Span::new(s, e + 1)),
        _ => Err(Error::Span(format!(
            "no token overlaps character span [{c0}, {c1})"
        ))),
    }
}

/// Converts one record into examples, resolving word spans to tokens.
pub fn examples_from_record(
    record: &Record,
    record_index: usize,
    task: &str,
    tokenizer: &Tokenizer,
) -> Result<Vec<EdgeProbingExample>> {
    let words = tokenizer::word_offsets(&record.text);
    let enc = tokenizer.encode_with_offsets(&record.text)?;
    let text_len = record.text.chars().count();
    let to_tokens = |span: Span| -> Result<Span> {
        span.check(words.len())?;
        let c0 = words[span.start].0;
        let c1 = words[span.end - 1].1;
        resolve_spans((c0, c1), &enc.offsets, text_len)
    };
    if record.targets.is_empty() {
        return Err(Error::Span("record has no targets".into()));
    }
    record
        .targets
        .iter()
        .map(|t| {
            Ok(EdgeProbingExample {
                text: record.text.clone(),
                tokens: enc.ids.clone(),
                span1: to_tokens(t.span1)?,
                span2: t.span2.map(to_tokens).transpose()?,
                word_span1: t.span1,
                word_span2: t.span2,
                label: t.label.clone(),
                task: task.to_string(),
                record: record_index,
            })
        })
        .collect()
}

/// Reads newline-delimited edge-probing records. Errors carry the 1-based
/// line number. Blank lines are skipped.
pub fn load_edge_probing_jsonl(path: &Path, task: &str, tokenizer: &Tokenizer) -> Result<Dataset> {
    let text = fs::read_to_string(path)?;
    let mut examples = Vec::new();
    let mut binary: Option<bool> = None;
    let at = |line: usize, message: String| Error::Dataset {
        path: path.to_path_buf(),
        line,
        message,
    };
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let record: Record = serde_json::from_str(line).map_err(|e| at(i + 1, e.to_string()))?;
        let exs = examples_from_record(&record, i, task, tokenizer).map_err(|e| at(i + 1, e.to_string()))?;
        for e in &exs {
            let is_binary = e.span2.is_some();
            if *binary.get_or_insert(is_binary) != is_binary {
                return Err(at(i + 1, "mixes unary and binary targets".into()));
            }
        }
        examples.extend(exs);
    }
    if examples.is_empty() {
        return Err(Error::Empty("dataset"));
    }
    Ok(Dataset::new(task, examples))
}
