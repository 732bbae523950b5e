//! Word-level vocabulary, tokenization and the clinical-note encoder.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use crate::autodiff::{Tape, Var};
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::nn::{key_padding_bias, Layers};
use crate::params::ParamSource;

pub const PAD: u32 = 0;
pub const BOS: u32 = 1;
pub const EOS: u32 = 2;
pub const MASK: u32 = 3;
pub const SEP: u32 = 4;
pub const UNK: u32 = 5;

pub const RESERVED: [&str; 6] = ["[PAD]", "[BOS]", "[EOS]", "[MASK]", "[SEP]", "[UNK]"];
pub const RESERVED_COUNT: usize = RESERVED.len();

/// Splits text into lowercase word and punctuation tokens.
///
/// Words are maximal runs of alphanumeric characters; every other
/// non-whitespace character is a token of its own, except the bracketed
/// reserved names (`[SEP]`, ...), which are kept whole.
pub fn split_tokens(text: &str) -> Vec<String> {
    let lower = text.to_lowercase();
    let mut out = Vec::new();
    let mut word = String::new();
    let mut rest = lower.as_str();
    while let Some(c) = rest.chars().next() {
        if c == '[' {
            if let Some(r) = RESERVED.iter().find(|r| rest.starts_with(&r.to_lowercase())) {
                flush(&mut word, &mut out);
                out.push(r.to_string());
                rest = &rest[r.len()..];
                continue;
            }
        }
        if c.is_alphanumeric() {
            word.push(c);
        } else {
            flush(&mut word, &mut out);
            if !c.is_whitespace() {
                out.push(c.to_string());
            }
        }
        rest = &rest[c.len_utf8()..];
    }
    flush(&mut word, &mut out);
    out
}

fn flush(word: &mut String, out: &mut Vec<String>) {
    if !word.is_empty() {
        out.push(std::mem::take(word));
    }
}

/// Canonical form of a text: its tokens joined by single spaces.
pub fn normalize(text: &str) -> String {
    split_tokens(text).join(" ")
}

/// Token string ↔ id bijection with fixed reserved ids `0..6`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
}

impl Vocabulary {
    /// A vocabulary of the reserved tokens followed by `words` in order.
    pub fn from_words(words: impl IntoIterator<Item = String>) -> Result<Self> {
        let mut tokens: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        tokens.extend(words);
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if t.is_empty() || t.contains(char::is_whitespace) {
                return Err(Error::contract(format!("invalid vocabulary token {t:?}")));
            }
            if index.insert(t.clone(), i as u32).is_some() {
                return Err(Error::contract(format!("duplicate vocabulary token {t:?}")));
            }
        }
        Ok(Vocabulary { tokens, index })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    /// Non-reserved tokens in id order.
    pub fn words(&self) -> &[String] {
        &self.tokens[RESERVED_COUNT..]
    }

    /// Ids of `text`'s tokens, `UNK` for unknown ones. No BOS/EOS.
    pub fn encode(&self, text: &str) -> Vec<u32> {
        split_tokens(text)
            .iter()
            .map(|t| self.id(t).unwrap_or(UNK))
            .collect()
    }

    /// One non-reserved token per line; line `i` holds id `i + 6`.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut body = String::new();
        for w in self.words() {
            body.push_str(w);
            body.push('\n');
        }
        fs::write(path, body).map_err(|e| Error::io(format!("writing {}", path.display()), e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let body = fs::read_to_string(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        Self::from_words(body.lines().map(str::to_string))
    }
}

/// Builds a frequency-ranked vocabulary of at most `max_size` entries
/// (reserved tokens included). Ties are broken lexicographically.
pub fn build_vocab<S: AsRef<str>>(corpus: &[S], max_size: usize) -> Result<Vocabulary> {
    if corpus.is_empty() {
        return Err(Error::contract("cannot build a vocabulary from an empty corpus"));
    }
    if max_size < RESERVED_COUNT {
        return Err(Error::contract(format!(
            "vocabulary size {max_size} cannot hold the {RESERVED_COUNT} reserved tokens"
        )));
    }
    let mut counts: HashMap<String, usize> = HashMap::new();
    for doc in corpus {
        for t in split_tokens(doc.as_ref()) {
            if !RESERVED.contains(&t.as_str()) {
                *counts.entry(t).or_default() += 1;
            }
        }
    }
    let mut ranked: Vec<(String, usize)> = counts.into_iter().collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    ranked.truncate(max_size - RESERVED_COUNT);
    Vocabulary::from_words(ranked.into_iter().map(|(t, _)| t))
}

/// Token ids plus a 1/0 attention mask; padding only as a suffix.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenSequence {
    ids: Vec<u32>,
    mask: Vec<bool>,
}

impl TokenSequence {
    /// An unpadded sequence; every id is a real token.
    pub fn unpadded(ids: Vec<u32>) -> Self {
        let mask = vec![true; ids.len()];
        TokenSequence { ids, mask }
    }

    pub fn ids(&self) -> &[u32] {
        &self.ids
    }

    /// `true` for real tokens, `false` for padding.
    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Number of real (non-padding) tokens.
    pub fn real_len(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    /// Appends `n` padding positions.
    pub fn padded(mut self, n: usize) -> Self {
        self.ids.extend(std::iter::repeat_n(PAD, n));
        self.mask.extend(std::iter::repeat_n(false, n));
        self
    }

    /// Drops the padding suffix.
    pub fn trimmed(mut self) -> Self {
        let n = self.real_len();
        self.ids.truncate(n);
        self.mask.truncate(n);
        self
    }

    /// Positions that hold ordinary (non-reserved) tokens.
    pub fn maskable_positions(&self) -> Vec<usize> {
        self.ids
            .iter()
            .zip(&self.mask)
            .enumerate()
            .filter(|(_, (&id, &real))| real && id as usize >= RESERVED_COUNT)
            .map(|(i, _)| i)
            .collect()
    }
}

/// `BOS text EOS`, truncated to `max_len` with EOS kept, then padded to `max_len`.
pub fn tokenize(text: &str, vocab: &Vocabulary, max_len: usize) -> TokenSequence {
    let max_len = max_len.max(2);
    let mut body = vocab.encode(text);
    body.truncate(max_len - 2);
    let mut ids = Vec::with_capacity(max_len);
    ids.push(BOS);
    ids.extend(body);
    ids.push(EOS);
    let real = ids.len();
    TokenSequence::unpadded(ids).padded(max_len - real)
}

/// Text of `ids` up to the first EOS, skipping PAD and BOS.
pub fn detokenize(ids: &[u32], vocab: &Vocabulary) -> String {
    ids.iter()
        .take_while(|&&id| id != EOS)
        .filter(|&&id| id != PAD && id != BOS)
        .map(|&id| vocab.token(id).unwrap_or(RESERVED[UNK as usize]))
        .collect::<Vec<_>>()
        .join(" ")
}

/// Encodes a token sequence into `len × d_text` embeddings with bidirectional
/// attention; padding keys receive zero weight.
pub fn encode_text(tape: &Tape, params: &dyn ParamSource, seq: &TokenSequence, cfg: &ModelConfig) -> Result<Var> {
    let n = seq.len();
    if n == 0 || n > cfg.max_text_len {
        return Err(Error::contract(format!(
            "text sequence of {n} tokens outside 1..={}",
            cfg.max_text_len
        )));
    }
    if let Some(&bad) = seq.ids.iter().find(|&&id| id as usize >= cfg.vocab_size) {
        return Err(Error::contract(format!(
            "token id {bad} outside vocabulary of {}",
            cfg.vocab_size
        )));
    }
    let layers = Layers::new(tape, params, cfg.layer_norm_eps);
    let table = layers.p("text.tok")?;
    let ids: Vec<usize> = seq.ids.iter().map(|&i| i as usize).collect();
    let tok = tape.gather_rows(&table, &ids)?;
    let pos = layers.positions("text.pos", n)?;
    let mut x = tape.add(&tok, &pos)?;
    let bias = (seq.real_len() < n).then(|| key_padding_bias(n, &seq.mask));
    for i in 0..cfg.text_layers {
        x = layers.encoder_block(&format!("text.blocks.{i}"), &x, cfg.text_heads, bias.as_ref())?;
    }
    layers.norm("text.ln_f", &x)
}
