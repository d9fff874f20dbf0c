//! Whitespace and byte-level BPE tokenizers with character offsets.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TokenizerKind {
    Whitespace,
    BytePair,
}

/// Token ids plus the `[start, end)` character range each one covers.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Encoding {
    pub ids: Vec<usize>,
    pub offsets: Vec<(usize, usize)>,
}

/// Reserved names for the special symbols the toolkit looks up.
pub const EOS: &str = "eos";
pub const SEP: &str = "sep";
pub const UNK: &str = "unk";

#[derive(Debug, Clone)]
pub struct Tokenizer {
    kind: TokenizerKind,
    vocab: Vec<String>,
    index: HashMap<String, usize>,
    /// Merge ranks for byte-pair tokenizers.
    ranks: HashMap<(String, String), usize>,
    /// Role name → id. Ids listed here are never produced by `encode`.
    specials: BTreeMap<String, usize>,
}

impl Tokenizer {
    /// Whitespace tokenizer over `vocab`; ids follow the list order.
    pub fn whitespace(vocab: Vec<String>) -> Result<Self> {
        Self::build(TokenizerKind::Whitespace, vocab, HashMap::new())
    }

    /// Byte-level BPE from an explicit vocabulary and merge list (rank order).
    pub fn byte_pair(vocab: HashMap<String, usize>, merges: Vec<(String, String)>) -> Result<Self> {
        let mut ordered = vec![None; vocab.len()];
        for (tok, id) in vocab {
            let slot = ordered
                .get_mut(id)
                .ok_or_else(|| Error::Config(format!("vocabulary ids are not contiguous: {id}")))?;
            if slot.replace(tok).is_some() {
                return Err(Error::Config(format!("vocabulary id {id} used twice")));
            }
        }
        let vocab: Vec<String> = ordered.into_iter().map(|t| t.expect("contiguous")).collect();
        let ranks = merges.into_iter().enumerate().map(|(i, m)| (m, i)).collect();
        Self::build(TokenizerKind::BytePair, vocab, ranks)
    }

    /// Loads `vocab.json` and `merges.txt` in the common GPT-2 layout. The
    /// `<|endoftext|>` entry, when present, becomes the EOS symbol.
    pub fn load_byte_pair(vocab_path: &Path, merges_path: &Path) -> Result<Self> {
        let vocab: HashMap<String, usize> = serde_json::from_str(&fs::read_to_string(vocab_path)?)?;
        let merges = fs::read_to_string(merges_path)?
            .lines()
            .filter(|l| !l.starts_with("#version") && !l.trim().is_empty())
            .map(|l| {
                let mut it = l.split(' ');
                match (it.next(), it.next(), it.next()) {
                    (Some(a), Some(b), None) => Ok((a.to_string(), b.to_string())),
                    _ => Err(Error::Config(format!("malformed merge line {l:?}"))),
                }
            })
            .collect::<Result<Vec<_>>>()?;
        let mut tok = Self::byte_pair(vocab, merges)?;
        if let Some(&id) = tok.index.get("<|endoftext|>") {
            tok.specials.insert(EOS.into(), id);
        }
        Ok(tok)
    }

    /// Whitespace tokenizer from a file holding one token per line.
    pub fn load_whitespace(path: &Path) -> Result<Self> {
        let vocab = fs::read_to_string(path)?
            .lines()
            .filter(|l| !l.is_empty())
            .map(str::to_string)
            .collect();
        Self::whitespace(vocab)
    }

    fn build(
        kind: TokenizerKind,
        vocab: Vec<String>,
        ranks: HashMap<(String, String), usize>,
    ) -> Result<Self> {
        let mut index = HashMap::with_capacity(vocab.len());
        for (i, t) in vocab.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::Config(format!("duplicate vocabulary entry {t:?}")));
            }
        }
        Ok(Self {
            kind,
            vocab,
            index,
            ranks,
            specials: BTreeMap::new(),
        })
    }

    pub fn kind(&self) -> TokenizerKind {
        self.kind
    }

    pub fn len(&self) -> usize {
        self.vocab.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vocab.is_empty()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.vocab.get(id).map(String::as_str)
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn vocab(&self) -> &[String] {
        &self.vocab
    }

    /// Id registered for a special role such as [`EOS`] or [`SEP`].
    pub fn special(&self, role: &str) -> Option<usize> {
        self.specials.get(role).copied()
    }

    pub fn specials(&self) -> &BTreeMap<String, usize> {
        &self.specials
    }

    pub fn is_special(&self, id: usize) -> bool {
        self.specials.values().any(|&s| s == id)
    }

    /// Marks `symbol` as the special token for `role`, appending it to the
    /// vocabulary when absent. Returns its id.
    pub fn add_special(&mut self, role: &str, symbol: &str) -> usize {
        let id = match self.index.get(symbol) {
            Some(&id) => id,
            None => {
                let id = self.vocab.len();
                self.vocab.push(symbol.to_string());
                self.index.insert(symbol.to_string(), id);
                id
            }
        };
        self.specials.insert(role.to_string(), id);
        id
    }

    pub fn encode(&self, text: &str) -> Result<Vec<usize>> {
        Ok(self.encode_with_offsets(text)?.ids)
    }

    pub fn encode_with_offsets(&self, text: &str) -> Result<Encoding> {
        match self.kind {
            TokenizerKind::Whitespace => self.encode_whitespace(text),
            TokenizerKind::BytePair => self.encode_byte_pair(text),
        }
    }

    fn encode_whitespace(&self, text: &str) -> Result<Encoding> {
        let unk = self.special(UNK);
        let mut enc = Encoding::default();
        for (start, end) in word_offsets(text) {
            let word: String = text.chars().skip(start).take(end - start).collect();
            let id = match self.index.get(&word) {
                Some(&id) if !self.is_special(id) => id,
                _ => unk.ok_or_else(|| {
                    Error::Unsupported(format!("word {word:?} is not in the vocabulary"))
                })?,
            };
            enc.ids.push(id);
            enc.offsets.push((start, end));
        }
        Ok(enc)
    }

    fn encode_byte_pair(&self, text: &str) -> Result<Encoding> {
        let byte_map = byte_to_unicode();
        // Byte offset → index of the character containing it.
        let mut char_of_byte = vec![0; text.len()];
        for (ci, (bi, ch)) in text.char_indices().enumerate() {
            char_of_byte[bi..bi + ch.len_utf8()].fill(ci);
        }
        let mut enc = Encoding::default();
        for (b0, b1) in pre_tokenize(text) {
            let bytes = &text.as_bytes()[b0..b1];
            // Each symbol: (text in byte-alphabet, byte start, byte end).
            let mut symbols: Vec<(String, usize, usize)> = bytes
                .iter()
                .enumerate()
                .map(|(i, &b)| (byte_map[b as usize].to_string(), b0 + i, b0 + i + 1))
                .collect();
            loop {
                let best = symbols
                    .windows(2)
                    .enumerate()
                    .filter_map(|(i, w)| {
                        self.ranks
                            .get(&(w[0].0.clone(), w[1].0.clone()))
                            .map(|&r| (r, i))
                    })
                    .min();
                let Some((_, i)) = best else { break };
                let right = symbols.remove(i + 1);
                symbols[i].0.push_str(&right.0);
                symbols[i].2 = right.2;
            }
            for (sym, s, e) in symbols {
                let id = self.index.get(&sym).copied().ok_or_else(|| {
                    Error::Unsupported(format!("byte-pair symbol {sym:?} missing from vocabulary"))
                })?;
                enc.ids.push(id);
                enc.offsets.push((char_of_byte[s], char_of_byte[e - 1] + 1));
            }
        }
        Ok(enc)
    }

    pub fn decode(&self, ids: &[usize]) -> Result<String> {
        let check = |id: usize| {
            self.vocab.get(id).ok_or(Error::OutOfVocabulary {
                id,
                vocab_size: self.vocab.len(),
            })
        };
        match self.kind {
            TokenizerKind::Whitespace => {
                let words = ids.iter().map(|&id| check(id).map(String::as_str));
                Ok(words.collect::<Result<Vec<_>>>()?.join(" "))
            }
            TokenizerKind::BytePair => {
                let inverse: HashMap<char, u8> = byte_to_unicode()
                    .into_iter()
                    .enumerate()
                    .map(|(b, c)| (c, b as u8))
                    .collect();
                let mut bytes = Vec::new();
                for &id in ids {
                    let tok = check(id)?;
                    if self.is_special(id) {
                        bytes.extend_from_slice(tok.as_bytes());
                        continue;
                    }
                    for ch in tok.chars() {
                        match inverse.get(&ch) {
                            Some(&b) => bytes.push(b),
                            None => bytes.extend_from_slice(ch.to_string().as_bytes()),
                        }
                    }
                }
                Ok(String::from_utf8_lossy(&bytes).into_owned())
            }
        }
    }
}

/// Character ranges of whitespace-separated words.
pub fn word_offsets(text: &str) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    let mut start = None;
    let mut n = 0;
    for (i, ch) in text.chars().enumerate() {
        match (ch.is_whitespace(), start) {
            (true, Some(s)) => {
                out.push((s, i));
                start = None;
            }
            (false, None) => start = Some(i),
            _ => {}
        }
        n = i + 1;
    }
    if let Some(s) = start {
        out.push((s, n));
    }
    out
}

/// The reversible byte → printable-character table used by byte-level BPE.
pub fn byte_to_unicode() -> Vec<char> {
    let printable = |b: u32| (33..=126).contains(&b) || (161..=172).contains(&b) || (174..=255).contains(&b);
    let mut extra = 0;
    (0..256u32)
        .map(|b| {
            if printable(b) {
                char::from_u32(b).expect("latin-1")
            } else {
                extra += 1;
                char::from_u32(255 + extra).expect("valid code point")
            }
        })
        .collect()
}

/// Splits `text` into byte ranges the way GPT-2's pre-tokenizer does:
/// contractions, an optional space followed by letters, digits or other
/// symbols, and whitespace runs (the last space of a run joins the next word).
pub fn pre_tokenize(text: &str) -> Vec<(usize, usize)> {
    let chars: Vec<(usize, char)> = text.char_indices().collect();
    let n = chars.len();
    let byte_at = |i: usize| if i < n { chars[i].0 } else { text.len() };
    let letter = |c: char| c.is_alphabetic();
    let digit = |c: char| c.is_numeric();
    let other = |c: char| !c.is_whitespace() && !c.is_alphabetic() && !c.is_numeric();
    let run = |mut j: usize, pred: &dyn Fn(char) -> bool| {
        while j < n && pred(chars[j].1) {
            j += 1;
        }
        j
    };
    let mut out = Vec::new();
    let mut i = 0;
    while i < n {
        let c = chars[i].1;
        if c == '\'' {
            let rest: String = chars[i + 1..].iter().take(2).map(|&(_, c)| c).collect();
            let len = ["ll", "re", "ve"]
                .iter()
                .find(|s| rest.starts_with(*s))
                .map(|_| 3)
                .or_else(|| ["s", "t", "m", "d"].iter().find(|s| rest.starts_with(*s)).map(|_| 2));
            if let Some(len) = len {
                out.push((byte_at(i), byte_at(i + len)));
                i += len;
                continue;
            }
        }
        let j = if c == ' ' && i + 1 < n && !chars[i + 1].1.is_whitespace() {
            i + 1
        } else {
            i
        };
        let head = chars[j].1;
        let end = if letter(head) {
            run(j, &letter)
        } else if digit(head) {
            run(j, &digit)
        } else if other(head) {
            run(j, &other)
        } else {
            let k = run(i, &|c: char| c.is_whitespace());
            if k == n || k - i == 1 {
                k
            } else {
                k - 1
            }
        };
        out.push((byte_at(i), byte_at(end)));
        i = end;
    }
    out
}
