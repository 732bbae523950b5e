//! Text-to-image cross-attention fusion.
//!
//! Each block lets the text stream query the visual embeddings:
//! `x + attn(ln_q x, ln_kv v)` followed by `x + ffn(ln2 x)`. Padding rows of
//! the text stream receive neither update, so they pass through untouched
//! apart from the final norm.

use crate::autodiff::{Tape, Var};
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::nn::{row_mask, Layers};
use crate::params::ParamSource;
use crate::tensor::Tensor;

/// Fused text embeddings plus what produced them.
#[derive(Clone, Debug)]
pub struct FusedEmbeddings {
    /// `text_len × d_fused`.
    pub embeddings: Var,
    /// Real-token flags of the conditioning text.
    pub text_mask: Vec<bool>,
    /// `attention[layer][head]` is a `text_len × n_patches` row-stochastic
    /// matrix. Empty unless maps were requested.
    pub attention: Vec<Vec<Tensor>>,
}

impl FusedEmbeddings {
    /// Head-averaged attention of the last layer, if maps were kept.
    pub fn mean_last_layer_attention(&self) -> Option<Tensor> {
        let heads = self.attention.last()?;
        let first = heads.first()?;
        let mut acc = Tensor::zeros(first.shape());
        for h in heads {
            for (a, v) in acc.data_mut().iter_mut().zip(h.data()) {
                *a += v / heads.len() as f64;
            }
        }
        Some(acc)
    }
}

pub fn fuse(
    tape: &Tape,
    params: &dyn ParamSource,
    text: &Var,
    text_mask: &[bool],
    vision: &Var,
    cfg: &ModelConfig,
    keep_maps: bool,
) -> Result<FusedEmbeddings> {
    let (t_rows, t_width) = text.value().dims2()?;
    let (_, v_width) = vision.value().dims2()?;
    if t_width != v_width || t_width != cfg.d_fused {
        return Err(Error::Shape {
            op: "fuse",
            lhs: text.shape().to_vec(),
            rhs: vision.shape().to_vec(),
        });
    }
    if text_mask.len() != t_rows {
        return Err(Error::contract(format!(
            "text mask of length {} for {t_rows} text rows",
            text_mask.len()
        )));
    }
    let layers = Layers::new(tape, params, cfg.layer_norm_eps);
    let keep = (!text_mask.iter().all(|&m| m)).then(|| row_mask(text_mask, t_width));
    let gate = |v: Var| -> Result<Var> {
        match &keep {
            Some(m) => tape.mul_const(&v, m),
            None => Ok(v),
        }
    };
    let mut x = text.clone();
    let mut attention = Vec::new();
    for i in 0..cfg.fusion_layers {
        let p = format!("fusion.blocks.{i}");
        let q = layers.norm(&format!("{p}.ln_q"), &x)?;
        let kv = layers.norm(&format!("{p}.ln_kv"), vision)?;
        let a = layers.attention(&format!("{p}.attn"), &q, &kv, cfg.fusion_heads, None, keep_maps)?;
        if keep_maps {
            attention.push(a.maps);
        }
        x = tape.add(&x, &gate(a.out)?)?;
        let h = layers.norm(&format!("{p}.ln2"), &x)?;
        let f = layers.ffn(&format!("{p}.ffn"), &h)?;
        x = tape.add(&x, &gate(f)?)?;
    }
    let embeddings = layers.norm("fusion.ln_f", &x)?;
    Ok(FusedEmbeddings {
        embeddings,
        text_mask: text_mask.to_vec(),
        attention,
    })
}
