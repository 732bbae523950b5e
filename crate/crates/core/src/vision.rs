//! Grayscale radiograph patchification and the patch transformer encoder.

use crate::autodiff::{Tape, Var};
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::nn::Layers;
use crate::params::ParamSource;
use crate::tensor::Tensor;

/// A single-channel image with pixel values in `[0, 1]`, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageGrid {
    height: usize,
    width: usize,
    pixels: Vec<f64>,
}

impl ImageGrid {
    pub fn new(height: usize, width: usize, pixels: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 || pixels.len() != height * width {
            return Err(Error::Shape {
                op: "image",
                lhs: vec![height, width],
                rhs: vec![pixels.len()],
            });
        }
        if let Some(bad) = pixels.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::contract(format!("pixel value {bad} outside [0, 1]")));
        }
        Ok(ImageGrid {
            height,
            width,
            pixels,
        })
    }

    pub fn filled(height: usize, width: usize, value: f64) -> Result<Self> {
        Self::new(height, width, vec![value; height * width])
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    pub fn get(&self, y: usize, x: usize) -> f64 {
        self.pixels[y * self.width + x]
    }
}

/// Flattened square patches in row-major grid order.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchSequence {
    pub grid_rows: usize,
    pub grid_cols: usize,
    pub patch_size: usize,
    /// `n_patches × patch_size²`.
    pub patches: Tensor,
}

impl PatchSequence {
    pub fn n_patches(&self) -> usize {
        self.grid_rows * self.grid_cols
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size
    }
}

/// Splits an image into `patch_size × patch_size` tiles, row-major over the
/// grid, each tile flattened row-major. No padding is ever added.
pub fn patchify(img: &ImageGrid, patch_size: usize) -> Result<PatchSequence> {
    let (h, w, p) = (img.height, img.width, patch_size);
    if p == 0 || h % p != 0 || w % p != 0 {
        return Err(Error::contract(format!(
            "image {h}x{w} (HxW) is not divisible into {p}x{p} patches"
        )));
    }
    let (gr, gc) = (h / p, w / p);
    let mut data = Vec::with_capacity(h * w);
    for r in 0..gr {
        for c in 0..gc {
            for y in 0..p {
                let start = (r * p + y) * w + c * p;
                data.extend_from_slice(&img.pixels[start..start + p]);
            }
        }
    }
    Ok(PatchSequence {
        grid_rows: gr,
        grid_cols: gc,
        patch_size: p,
        patches: Tensor::new(vec![gr * gc, p * p], data)?,
    })
}

/// Exact inverse of [`patchify`].
pub fn unpatchify(seq: &PatchSequence) -> Result<ImageGrid> {
    let p = seq.patch_size;
    let expected = [seq.n_patches(), p * p];
    if p == 0 || seq.patches.shape() != expected {
        return Err(Error::contract(format!(
            "patch tensor {:?} inconsistent with a {}x{} grid of {p}-pixel patches",
            seq.patches.shape(),
            seq.grid_rows,
            seq.grid_cols
        )));
    }
    let (h, w) = (seq.grid_rows * p, seq.grid_cols * p);
    let mut pixels = vec![0.0; h * w];
    let src = seq.patches.data();
    for r in 0..seq.grid_rows {
        for c in 0..seq.grid_cols {
            let patch = &src[(r * seq.grid_cols + c) * p * p..][..p * p];
            for y in 0..p {
                let dst = (r * p + y) * w + c * p;
                pixels[dst..dst + p].copy_from_slice(&patch[y * p..(y + 1) * p]);
            }
        }
    }
    ImageGrid::new(h, w, pixels)
}

/// Encodes an image into `n_patches × d_vision` contextual embeddings.
pub fn encode_image(tape: &Tape, params: &dyn ParamSource, img: &ImageGrid, cfg: &ModelConfig) -> Result<Var> {
    check_image(img, cfg)?;
    let seq = patchify(img, cfg.patch_size)?;
    encode_patches(tape, params, &seq.patches, &[], cfg)
}

pub(crate) fn check_image(img: &ImageGrid, cfg: &ModelConfig) -> Result<()> {
    if img.height != cfg.image_height || img.width != cfg.image_width {
        return Err(Error::Shape {
            op: "encode_image",
            lhs: vec![img.height, img.width],
            rhs: vec![cfg.image_height, cfg.image_width],
        });
    }
    Ok(())
}

/// Patch embedding, optional replacement of `masked` rows by the learned
/// mask token, learned positions, the block stack and the final norm.
pub(crate) fn encode_patches(
    tape: &Tape,
    params: &dyn ParamSource,
    patches: &Tensor,
    masked: &[usize],
    cfg: &ModelConfig,
) -> Result<Var> {
    let n = cfg.n_patches();
    if patches.shape() != [n, cfg.patch_dim()] {
        return Err(Error::Shape {
            op: "encode_patches",
            lhs: patches.shape().to_vec(),
            rhs: vec![n, cfg.patch_dim()],
        });
    }
    let layers = Layers::new(tape, params, cfg.layer_norm_eps);
    let input = tape.constant(patches.clone());
    let mut x = layers.linear("vision.patch", &input)?;
    if !masked.is_empty() {
        let token = layers.p("vision.mask_token")?;
        x = tape.replace_rows(&x, masked, &token)?;
    }
    let pos = layers.p("vision.pos")?;
    x = tape.add(&x, &pos)?;
    for i in 0..cfg.vision_layers {
        x = layers.encoder_block(&format!("vision.blocks.{i}"), &x, cfg.vision_heads, None)?;
    }
    layers.norm("vision.ln_f", &x)
}
