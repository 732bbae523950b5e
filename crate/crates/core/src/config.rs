//! Architectural hyperparameters.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Number of pathology classes the detection head predicts.
pub const N_PATHOLOGIES: usize = 6;

/// Every architectural hyperparameter of the four model components.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub image_height: usize,
    pub image_width: usize,
    pub patch_size: usize,

    pub d_vision: usize,
    pub d_text: usize,
    pub d_fused: usize,
    pub d_decoder: usize,

    pub vision_layers: usize,
    pub vision_heads: usize,
    pub text_layers: usize,
    pub text_heads: usize,
    pub fusion_layers: usize,
    pub fusion_heads: usize,
    pub decoder_layers: usize,
    pub decoder_heads: usize,

    /// Feed-forward width as a multiple of the stream width.
    pub ffn_multiplier: usize,
    pub vocab_size: usize,
    pub max_text_len: usize,
    pub max_report_len: usize,
    pub layer_norm_eps: f64,
}

impl ModelConfig {
    /// 64×64 images, width 32, two layers per stack.
    pub fn toy() -> Self {
        ModelConfig {
            image_height: 64,
            image_width: 64,
            patch_size: 16,
            d_vision: 32,
            d_text: 32,
            d_fused: 32,
            d_decoder: 32,
            vision_layers: 2,
            vision_heads: 4,
            text_layers: 2,
            text_heads: 4,
            fusion_layers: 2,
            fusion_heads: 4,
            decoder_layers: 2,
            decoder_heads: 4,
            ffn_multiplier: 4,
            vocab_size: 256,
            max_text_len: 64,
            max_report_len: 48,
            layer_norm_eps: 1e-5,
        }
    }

    /// Reference dimensions: 224×224 input, 16-pixel patches, 768-wide
    /// encoders and fusion with 12 layers × 12 heads, and a 24-layer,
    /// 16-head decoder of width 1024.
    pub fn paper_shape() -> Self {
        ModelConfig {
            image_height: 224,
            image_width: 224,
            patch_size: 16,
            d_vision: 768,
            d_text: 768,
            d_fused: 768,
            d_decoder: 1024,
            vision_layers: 12,
            vision_heads: 12,
            text_layers: 12,
            text_heads: 12,
            fusion_layers: 12,
            fusion_heads: 12,
            decoder_layers: 24,
            decoder_heads: 16,
            ffn_multiplier: 4,
            vocab_size: 32_000,
            max_text_len: 128,
            max_report_len: 128,
            layer_norm_eps: 1e-5,
        }
    }

    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "toy" => Some(Self::toy()),
            "paper-shape" => Some(Self::paper_shape()),
            _ => None,
        }
    }

    pub fn grid_rows(&self) -> usize {
        self.image_height / self.patch_size
    }

    pub fn grid_cols(&self) -> usize {
        self.image_width / self.patch_size
    }

    pub fn n_patches(&self) -> usize {
        self.grid_rows() * self.grid_cols()
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size
    }

    /// Checks every structural constraint; the error names the first
    /// offending field, prefixed by `path`.
    pub fn validate_at(&self, path: &str) -> Result<()> {
        let field = |name: &str| {
            if path.is_empty() {
                name.to_string()
            } else {
                format!("{path}.{name}")
            }
        };
        let positive = [
            ("image_height", self.image_height),
            ("image_width", self.image_width),
            ("patch_size", self.patch_size),
            ("d_vision", self.d_vision),
            ("d_text", self.d_text),
            ("d_fused", self.d_fused),
            ("d_decoder", self.d_decoder),
            ("ffn_multiplier", self.ffn_multiplier),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::config(field(name), "must be positive"));
            }
        }
        if self.image_height % self.patch_size != 0 {
            return Err(Error::config(
                field("image_height"),
                format!("{} not divisible by patch_size {}", self.image_height, self.patch_size),
            ));
        }
        if self.image_width % self.patch_size != 0 {
            return Err(Error::config(
                field("image_width"),
                format!("{} not divisible by patch_size {}", self.image_width, self.patch_size),
            ));
        }
        if self.d_text != self.d_vision {
            return Err(Error::config(
                field("d_text"),
                format!("must equal d_vision ({}), got {}", self.d_vision, self.d_text),
            ));
        }
        if self.d_fused != self.d_vision {
            return Err(Error::config(
                field("d_fused"),
                format!("must equal d_vision ({}), got {}", self.d_vision, self.d_fused),
            ));
        }
        let stacks = [
            ("vision_heads", self.vision_layers, self.vision_heads, self.d_vision),
            ("text_heads", self.text_layers, self.text_heads, self.d_text),
            ("fusion_heads", self.fusion_layers, self.fusion_heads, self.d_fused),
            ("decoder_heads", self.decoder_layers, self.decoder_heads, self.d_decoder),
        ];
        for (name, layers, heads, width) in stacks {
            if layers == 0 {
                continue;
            }
            if heads == 0 {
                return Err(Error::config(field(name), "must be at least 1 when the stack has layers"));
            }
            if width % heads != 0 {
                return Err(Error::config(
                    field(name),
                    format!("{heads} heads do not divide width {width}"),
                ));
            }
        }
        if self.vocab_size < crate::text::RESERVED_COUNT {
            return Err(Error::config(
                field("vocab_size"),
                format!("must hold the {} reserved tokens", crate::text::RESERVED_COUNT),
            ));
        }
        if self.max_text_len < 2 {
            return Err(Error::config(field("max_text_len"), "must fit BOS and EOS"));
        }
        if self.max_report_len < 1 {
            return Err(Error::config(field("max_report_len"), "must be positive"));
        }
        if !(self.layer_norm_eps > 0.0 && self.layer_norm_eps.is_finite()) {
            return Err(Error::config(field("layer_norm_eps"), "must be positive and finite"));
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.validate_at("")
    }
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::toy()
    }
}
