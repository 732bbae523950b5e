//! Transformer building blocks shared by the encoders, fusion and decoder.

use std::sync::Arc;

use crate::autodiff::{Tape, Var, MASKED};
use crate::error::{Error, Result};
use crate::params::ParamSource;
use crate::tensor::Tensor;

/// Named-parameter layer helpers over one tape.
pub(crate) struct Layers<'a> {
    pub tape: &'a Tape,
    pub params: &'a dyn ParamSource,
    pub eps: f64,
}

/// Output of one multi-head attention call.
pub(crate) struct Attended {
    pub out: Var,
    /// Per-head attention weights (`queries × keys`), when requested.
    pub maps: Vec<Tensor>,
}

impl<'a> Layers<'a> {
    pub fn new(tape: &'a Tape, params: &'a dyn ParamSource, eps: f64) -> Self {
        Layers { tape, params, eps }
    }

    pub fn p(&self, name: &str) -> Result<Var> {
        self.params.param(self.tape, name)
    }

    pub fn linear(&self, prefix: &str, x: &Var) -> Result<Var> {
        let w = self.p(&format!("{prefix}.w"))?;
        let b = self.p(&format!("{prefix}.b"))?;
        let y = self.tape.matmul(x, &w)?;
        self.tape.add_bias(&y, &b)
    }

    pub fn norm(&self, prefix: &str, x: &Var) -> Result<Var> {
        let g = self.p(&format!("{prefix}.g"))?;
        let b = self.p(&format!("{prefix}.b"))?;
        self.tape.layer_norm(x, &g, &b, self.eps)
    }

    pub fn ffn(&self, prefix: &str, x: &Var) -> Result<Var> {
        let h = self.linear(&format!("{prefix}.up"), x)?;
        let h = self.tape.gelu(&h);
        self.linear(&format!("{prefix}.down"), &h)
    }

    /// Scaled dot-product attention of `queries` over `memory`.
    ///
    /// `bias`, when given, is added to the `queries × keys` scores before the
    /// softmax; entries of [`MASKED`] remove a key from a query's view.
    pub fn attention(
        &self,
        prefix: &str,
        queries: &Var,
        memory: &Var,
        heads: usize,
        bias: Option<&Tensor>,
        keep_maps: bool,
    ) -> Result<Attended> {
        let q = self.linear(&format!("{prefix}.q"), queries)?;
        let k = self.linear(&format!("{prefix}.k"), memory)?;
        let v = self.linear(&format!("{prefix}.v"), memory)?;
        let width = q.value().last_dim();
        if heads == 0 || width % heads != 0 {
            return Err(Error::contract(format!(
                "{heads} heads do not divide attention width {width}"
            )));
        }
        let dh = width / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut outs = Vec::with_capacity(heads);
        let mut maps = Vec::new();
        for h in 0..heads {
            let qh = self.tape.slice_cols(&q, h * dh, dh)?;
            let kh = self.tape.slice_cols(&k, h * dh, dh)?;
            let vh = self.tape.slice_cols(&v, h * dh, dh)?;
            let kt = self.tape.transpose(&kh)?;
            let scores = self.tape.matmul(&qh, &kt)?;
            let mut scores = self.tape.scale(&scores, scale);
            if let Some(b) = bias {
                scores = self.tape.add_const(&scores, b)?;
            }
            let weights = self.tape.softmax(&scores, 1)?;
            if keep_maps {
                maps.push(weights.value().clone());
            }
            outs.push(self.tape.matmul(&weights, &vh)?);
        }
        let joined = if outs.len() == 1 {
            outs.pop().expect("one head")
        } else {
            self.tape.concat_cols(&outs)?
        };
        let out = self.linear(&format!("{prefix}.o"), &joined)?;
        Ok(Attended { out, maps })
    }

    /// Pre-norm self-attention block: `x + attn(ln1 x)`, then `x + ffn(ln2 x)`.
    pub fn encoder_block(&self, prefix: &str, x: &Var, heads: usize, bias: Option<&Tensor>) -> Result<Var> {
        let h = self.norm(&format!("{prefix}.ln1"), x)?;
        let a = self.attention(&format!("{prefix}.attn"), &h, &h, heads, bias, false)?;
        let x = self.tape.add(x, &a.out)?;
        let h = self.norm(&format!("{prefix}.ln2"), &x)?;
        let f = self.ffn(&format!("{prefix}.ffn"), &h)?;
        self.tape.add(&x, &f)
    }

    /// Rows `0..n` of a positional table.
    pub fn positions(&self, name: &str, n: usize) -> Result<Var> {
        let table = self.p(name)?;
        let available = table.value().rows();
        if n > available {
            return Err(Error::contract(format!(
                "sequence of {n} positions exceeds the {available} available in `{name}`"
            )));
        }
        let idx: Vec<usize> = (0..n).collect();
        self.tape.gather_rows(&table, &idx)
    }
}

/// `[queries × keys]` bias hiding keys whose flag is false.
pub(crate) fn key_padding_bias(queries: usize, key_real: &[bool]) -> Tensor {
    let keys = key_real.len();
    Tensor::from_fn(&[queries, keys], |i| if key_real[i % keys] { 0.0 } else { MASKED })
}

/// `[n × n]` bias letting position `i` see keys `0..=i` only, and only real ones.
pub(crate) fn causal_bias(n: usize, key_real: Option<&[bool]>) -> Tensor {
    Tensor::from_fn(&[n, n], |i| {
        let (r, c) = (i / n, i % n);
        let hidden = c > r || key_real.is_some_and(|m| !m[c]);
        if hidden {
            MASKED
        } else {
            0.0
        }
    })
}

/// `[rows × cols]` multiplier that zeroes the rows whose flag is false.
pub(crate) fn row_mask(row_real: &[bool], cols: usize) -> Arc<Tensor> {
    Arc::new(Tensor::from_fn(&[row_real.len(), cols], |i| {
        if row_real[i / cols] {
            1.0
        } else {
            0.0
        }
    }))
}
