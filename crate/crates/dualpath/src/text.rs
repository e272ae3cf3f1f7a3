//! Vocabulary construction and sentence encoding.
//!
//! A sentence becomes a fixed-length window of word indices. Conceptually
//! each index row is one row of a sparse one-hot matrix; zero rows (PAD)
//! realize the window's zero padding. `left` alignment places the words at
//! the window start; `shift` draws a uniform offset so the same sentence
//! lands at varying positions, which is the position-shift augmentation.

use std::collections::{HashMap, HashSet};
use std::fmt::Write as _;
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// How words are placed inside the fixed-length window.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Alignment {
    /// Words at positions `[0, n)`, trailing zeros.
    Left,
    /// Words at `[offset, offset+n)` with `offset` uniform in `[0, L-n]`.
    Shift,
}

impl Alignment {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "left" => Ok(Alignment::Left),
            "shift" => Ok(Alignment::Shift),
            other => Err(Error::Config(format!("unknown alignment {other:?} (want left|shift)"))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Alignment::Left => "left",
            Alignment::Shift => "shift",
        }
    }
}

/// Word-to-index dictionary; indices are a bijection onto `[0, d)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Vocabulary {
    words: Vec<String>,
    index: HashMap<String, usize>,
}

/// Lowercase a sentence and split it into tokens, stripping punctuation
/// from token edges.
pub fn tokenize(sentence: &str) -> Vec<String> {
    sentence
        .to_lowercase()
        .split_whitespace()
        .map(|t| t.trim_matches(|c: char| !c.is_alphanumeric()).to_string())
        .filter(|t| !t.is_empty())
        .collect()
}

impl Vocabulary {
    /// Build from a caption stream. Indices follow first occurrence, words
    /// outside the allowlist (when given) or below `min_freq` are dropped.
    pub fn build<'a>(
        corpus: impl IntoIterator<Item = &'a str>,
        allowlist: Option<&HashSet<String>>,
        min_freq: usize,
    ) -> Result<Self> {
        let mut order: Vec<String> = Vec::new();
        let mut counts: HashMap<String, usize> = HashMap::new();
        let mut saw_any = false;
        for sentence in corpus {
            saw_any = true;
            for tok in tokenize(sentence) {
                if let Some(allow) = allowlist {
                    if !allow.contains(&tok) {
                        continue;
                    }
                }
                let c = counts.entry(tok.clone()).or_insert(0);
                if *c == 0 {
                    order.push(tok);
                }
                *c += 1;
            }
        }
        if !saw_any {
            return Err(Error::Data("cannot build a vocabulary from an empty corpus".into()));
        }
        let words: Vec<String> = order
            .into_iter()
            .filter(|w| counts[w] >= min_freq.max(1))
            .collect();
        if words.is_empty() {
            return Err(Error::Data("no word survived vocabulary filtering".into()));
        }
        let index = words
            .iter()
            .enumerate()
            .map(|(i, w)| (w.clone(), i))
            .collect();
        Ok(Vocabulary { words, index })
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn index_of(&self, word: &str) -> Option<usize> {
        self.index.get(word).copied()
    }

    pub fn word(&self, index: usize) -> &str {
        &self.words[index]
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    /// One "word<TAB>index" line per entry.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        for (i, w) in self.words.iter().enumerate() {
            writeln!(out, "{w}\t{i}").expect("string write");
        }
        std::fs::write(path, out)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let content = std::fs::read_to_string(path)?;
        let mut pairs: Vec<(String, usize)> = Vec::new();
        for (lineno, line) in content.lines().enumerate() {
            if line.is_empty() {
                continue;
            }
            let (word, idx) = line.split_once('\t').ok_or(Error::Parse {
                line: lineno + 1,
                msg: format!("expected word<TAB>index, got {line:?}"),
            })?;
            let idx: usize = idx.parse().map_err(|_| Error::Parse {
                line: lineno + 1,
                msg: format!("bad index {idx:?}"),
            })?;
            pairs.push((word.to_string(), idx));
        }
        if pairs.is_empty() {
            return Err(Error::Data(format!("vocabulary file {} is empty", path.display())));
        }
        let mut words = vec![String::new(); pairs.len()];
        for (word, idx) in pairs {
            if idx >= words.len() || !words[idx].is_empty() {
                return Err(Error::Format(format!(
                    "vocabulary indices are not a bijection onto [0,{})",
                    words.len()
                )));
            }
            words[idx] = word;
        }
        let index = words.iter().enumerate().map(|(i, w)| (w.clone(), i)).collect();
        Ok(Vocabulary { words, index })
    }
}

/// Fixed-length index window for one sentence.
///
/// Exactly `n` contiguous slots hold word indices, the rest are `None`
/// (zero rows of the one-hot code).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TextCode {
    slots: Vec<Option<usize>>,
    n: usize,
    offset: usize,
}

impl TextCode {
    pub fn slots(&self) -> &[Option<usize>] {
        &self.slots
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    /// Number of non-PAD entries.
    pub fn word_count(&self) -> usize {
        self.n
    }

    pub fn offset(&self) -> usize {
        self.offset
    }

    /// The word indices in order, without padding.
    pub fn decode(&self) -> Vec<usize> {
        self.slots.iter().flatten().copied().collect()
    }
}

/// Map a sentence to in-vocabulary word indices, dropping unknown words.
pub fn filter_indices(sentence: &str, vocab: &Vocabulary) -> Vec<usize> {
    tokenize(sentence)
        .iter()
        .filter_map(|t| vocab.index_of(t))
        .collect()
}

/// Encode a sentence into a length-`max_len` window. Sentences longer than
/// the window keep their first `max_len` words; the rest are clipped.
pub fn encode_sentence(
    sentence: &str,
    vocab: &Vocabulary,
    max_len: usize,
    alignment: Alignment,
    rng: &mut ChaCha8Rng,
) -> Result<TextCode> {
    let mut indices = filter_indices(sentence, vocab);
    if indices.is_empty() {
        return Err(Error::Data(format!(
            "sentence {sentence:?} has no in-vocabulary words"
        )));
    }
    indices.truncate(max_len);
    let n = indices.len();
    let offset = match alignment {
        Alignment::Left => 0,
        Alignment::Shift => rng.gen_range(0..=max_len - n),
    };
    let mut slots = vec![None; max_len];
    for (i, ix) in indices.into_iter().enumerate() {
        slots[offset + i] = Some(ix);
    }
    Ok(TextCode { slots, n, offset })
}

/// Initialization source for the first-layer embedding kernel.
pub enum EmbeddingSource<'a> {
    /// Copy rows from a `[d, E]` table, in vocabulary order.
    Table(&'a Tensor),
    /// Uniform on `[-1/sqrt(E), 1/sqrt(E)]`.
    Random { dim: usize },
}

/// Produce the `[d, E]` first-layer kernel for a vocabulary.
pub fn init_word_embedding(
    vocab: &Vocabulary,
    source: EmbeddingSource,
    rng: &mut ChaCha8Rng,
) -> Result<Tensor> {
    let d = vocab.len();
    match source {
        EmbeddingSource::Table(table) => {
            if table.shape().len() != 2 || table.shape()[0] != d {
                return Err(Error::Format(format!(
                    "embedding table shape {:?} does not match vocabulary size {d}",
                    table.shape()
                )));
            }
            Ok(table.clone())
        }
        EmbeddingSource::Random { dim } => {
            let bound = 1.0 / (dim as f64).sqrt();
            let data = (0..d * dim).map(|_| rng.gen_range(-bound..bound)).collect();
            Tensor::new(vec![d, dim], data)
        }
    }
}

/// Write an embedding table: first line "d E", then one row of E reals per
/// vocabulary index.
pub fn save_embedding_table(table: &Tensor, path: &Path) -> Result<()> {
    let shape = table.shape();
    if shape.len() != 2 {
        return Err(Error::Format(format!("embedding table must be [d,E], got {shape:?}")));
    }
    let (d, e) = (shape[0], shape[1]);
    let mut out = String::new();
    writeln!(out, "{d} {e}").expect("string write");
    for r in 0..d {
        let row: Vec<String> = table.data()[r * e..(r + 1) * e]
            .iter()
            .map(|v| format!("{v}"))
            .collect();
        writeln!(out, "{}", row.join(" ")).expect("string write");
    }
    std::fs::write(path, out)?;
    Ok(())
}

pub fn load_embedding_table(path: &Path) -> Result<Tensor> {
    let content = std::fs::read_to_string(path)?;
    let mut lines = content.lines().enumerate();
    let (_, header) = lines
        .next()
        .ok_or_else(|| Error::Format(format!("embedding file {} is empty", path.display())))?;
    let dims: Vec<usize> = header
        .split_whitespace()
        .map(|t| t.parse().map_err(|_| Error::Parse { line: 1, msg: format!("bad header {header:?}") }))
        .collect::<Result<_>>()?;
    if dims.len() != 2 {
        return Err(Error::Parse { line: 1, msg: format!("expected \"d E\", got {header:?}") });
    }
    let (d, e) = (dims[0], dims[1]);
    let mut data = Vec::with_capacity(d * e);
    for (lineno, line) in lines {
        if line.is_empty() {
            continue;
        }
        for tok in line.split_whitespace() {
            let v: f64 = tok.parse().map_err(|_| Error::Parse {
                line: lineno + 1,
                msg: format!("bad real {tok:?}"),
            })?;
            data.push(v);
        }
    }
    if data.len() != d * e {
        return Err(Error::Format(format!(
            "embedding file {} holds {} values, header promises {}",
            path.display(),
            data.len(),
            d * e
        )));
    }
    Tensor::new(vec![d, e], data)
}
