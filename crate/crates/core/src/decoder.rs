//! Autoregressive report decoder and greedy/beam generation.

use std::cmp::Ordering;

use crate::autodiff::{Tape, Var};
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::fusion::FusedEmbeddings;
use crate::nn::{causal_bias, key_padding_bias, Layers};
use crate::params::ParamSource;
use crate::text::{detokenize, Vocabulary, BOS, EOS};

/// Fused embeddings projected to decoder width, ready for cross-attention.
#[derive(Clone, Debug)]
pub struct DecoderMemory {
    states: Var,
    key_real: Vec<bool>,
}

impl DecoderMemory {
    pub fn states(&self) -> &Var {
        &self.states
    }
}

pub fn decoder_memory(
    tape: &Tape,
    params: &dyn ParamSource,
    fused: &FusedEmbeddings,
    cfg: &ModelConfig,
) -> Result<DecoderMemory> {
    let layers = Layers::new(tape, params, cfg.layer_norm_eps);
    let states = layers.linear("decoder.bridge", &fused.embeddings)?;
    Ok(DecoderMemory {
        states,
        key_real: fused.text_mask.clone(),
    })
}

/// Next-token logits (`len × vocab`) for every prefix of `ids`.
///
/// Position `i` attends to input positions `0..=i` only, so its logits do
/// not depend on later tokens.
pub fn decoder_logits(
    tape: &Tape,
    params: &dyn ParamSource,
    memory: &DecoderMemory,
    ids: &[u32],
    cfg: &ModelConfig,
) -> Result<Var> {
    let n = ids.len();
    if n == 0 || n > cfg.max_report_len {
        return Err(Error::contract(format!(
            "decoder input of {n} tokens outside 1..={}",
            cfg.max_report_len
        )));
    }
    if let Some(&bad) = ids.iter().find(|&&id| id as usize >= cfg.vocab_size) {
        return Err(Error::contract(format!(
            "token id {bad} outside vocabulary of {}",
            cfg.vocab_size
        )));
    }
    let layers = Layers::new(tape, params, cfg.layer_norm_eps);
    let table = layers.p("decoder.tok")?;
    let idx: Vec<usize> = ids.iter().map(|&i| i as usize).collect();
    let tok = tape.gather_rows(&table, &idx)?;
    let pos = layers.positions("decoder.pos", n)?;
    let mut x = tape.add(&tok, &pos)?;
    let self_bias = causal_bias(n, None);
    let cross_bias = (!memory.key_real.iter().all(|&m| m)).then(|| key_padding_bias(n, &memory.key_real));
    for i in 0..cfg.decoder_layers {
        let p = format!("decoder.blocks.{i}");
        let h = layers.norm(&format!("{p}.ln1"), &x)?;
        let a = layers.attention(&format!("{p}.self_attn"), &h, &h, cfg.decoder_heads, Some(&self_bias), false)?;
        x = tape.add(&x, &a.out)?;
        let h = layers.norm(&format!("{p}.ln2"), &x)?;
        let c = layers.attention(
            &format!("{p}.cross_attn"),
            &h,
            &memory.states,
            cfg.decoder_heads,
            cross_bias.as_ref(),
            false,
        )?;
        x = tape.add(&x, &c.out)?;
        let h = layers.norm(&format!("{p}.ln3"), &x)?;
        let f = layers.ffn(&format!("{p}.ffn"), &h)?;
        x = tape.add(&x, &f)?;
    }
    let x = layers.norm("decoder.ln_f", &x)?;
    layers.linear("decoder.head", &x)
}

/// Log-probabilities of the token following `prefix` (which starts with BOS).
pub fn decode_step(
    params: &dyn ParamSource,
    memory: &DecoderMemory,
    prefix: &[u32],
    cfg: &ModelConfig,
) -> Result<Vec<f64>> {
    let tape = Tape::no_grad();
    let logits = decoder_logits(&tape, params, memory, prefix, cfg)?;
    Ok(log_softmax(logits.value().row(prefix.len() - 1)))
}

fn log_softmax(row: &[f64]) -> Vec<f64> {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    row.iter().map(|v| v - lse).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DecodingMode {
    Greedy,
    /// Beam search keeping this many hypotheses.
    Beam(usize),
}

/// A generated report.
#[derive(Clone, Debug, PartialEq)]
pub struct DiagnosticReport {
    /// Generated ids, BOS excluded, EOS included when produced.
    pub ids: Vec<u32>,
    pub text: String,
    /// Log-probability of each generated id.
    pub token_log_probs: Vec<f64>,
}

impl DiagnosticReport {
    pub fn log_prob(&self) -> f64 {
        self.token_log_probs.iter().sum()
    }
}

#[derive(Clone, Debug)]
struct Hypothesis {
    ids: Vec<u32>,
    lps: Vec<f64>,
    score: f64,
    done: bool,
}

impl Hypothesis {
    fn extend(&self, id: u32, lp: f64, max_len: usize) -> Self {
        let mut ids = self.ids.clone();
        ids.push(id);
        let mut lps = self.lps.clone();
        lps.push(lp);
        let done = id == EOS || ids.len() >= max_len;
        Hypothesis {
            ids,
            lps,
            score: self.score + lp,
            done,
        }
    }

    fn input(&self) -> Vec<u32> {
        std::iter::once(BOS).chain(self.ids.iter().copied()).collect()
    }
}

/// Higher score first; equal scores fall back to lexicographic id order.
fn rank(a: &Hypothesis, b: &Hypothesis) -> Ordering {
    b.score.total_cmp(&a.score).then_with(|| a.ids.cmp(&b.ids))
}

/// Generates a report conditioned on fused embeddings. Deterministic: greedy
/// breaks ties toward the lowest id, beam search toward lexicographically
/// smaller sequences.
pub fn generate_report(
    params: &dyn ParamSource,
    fused: &FusedEmbeddings,
    cfg: &ModelConfig,
    vocab: &Vocabulary,
    mode: DecodingMode,
) -> Result<DiagnosticReport> {
    let tape = Tape::no_grad();
    let memory = decoder_memory(&tape, params, fused, cfg)?;
    let max_len = cfg.max_report_len;
    let greedy = greedy(params, &memory, cfg, max_len)?;
    let best = match mode {
        DecodingMode::Greedy => greedy,
        DecodingMode::Beam(0) => return Err(Error::config("beam", "width must be at least 1")),
        DecodingMode::Beam(k) => {
            let beam = beam(params, &memory, cfg, max_len, k)?;
            // A narrow beam can prune the greedy path; never return worse.
            if rank(&greedy, &beam) == Ordering::Less {
                greedy
            } else {
                beam
            }
        }
    };
    Ok(DiagnosticReport {
        text: detokenize(&best.ids, vocab),
        ids: best.ids,
        token_log_probs: best.lps,
    })
}

fn greedy(params: &dyn ParamSource, memory: &DecoderMemory, cfg: &ModelConfig, max_len: usize) -> Result<Hypothesis> {
    let mut h = Hypothesis {
        ids: Vec::new(),
        lps: Vec::new(),
        score: 0.0,
        done: false,
    };
    while !h.done {
        let lp = decode_step(params, memory, &h.input(), cfg)?;
        let mut best = 0;
        for (i, &v) in lp.iter().enumerate() {
            if v > lp[best] {
                best = i;
            }
        }
        h = h.extend(best as u32, lp[best], max_len);
    }
    Ok(h)
}

fn beam(
    params: &dyn ParamSource,
    memory: &DecoderMemory,
    cfg: &ModelConfig,
    max_len: usize,
    k: usize,
) -> Result<Hypothesis> {
    let mut beams = vec![Hypothesis {
        ids: Vec::new(),
        lps: Vec::new(),
        score: 0.0,
        done: false,
    }];
    while beams.iter().any(|b| !b.done) {
        let mut candidates = Vec::new();
        for b in &beams {
            if b.done {
                candidates.push(b.clone());
                continue;
            }
            let lp = decode_step(params, memory, &b.input(), cfg)?;
            for (id, &v) in lp.iter().enumerate() {
                candidates.push(b.extend(id as u32, v, max_len));
            }
        }
        candidates.sort_by(rank);
        candidates.truncate(k);
        beams = candidates;
    }
    Ok(beams.swap_remove(0))
}
