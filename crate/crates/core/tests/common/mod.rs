#![allow(dead_code)]

use std::collections::HashSet;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use cxr_vlm::autodiff::{Tape, Var};
use cxr_vlm::objectives::{detection_loss, detection_targets, mim_loss, mlm_loss, target_ids, teacher_forced_loss, MaskPlan};
use cxr_vlm::params::ParamSource;
use cxr_vlm::synth::{generate_image, Canvas, PathologyLabel, Placement, Shape};
use cxr_vlm::text::{build_vocab, tokenize, TokenSequence, Vocabulary};
use cxr_vlm::vision::{encode_image, ImageGrid};
use cxr_vlm::{ModelConfig, Result, Tensor};

pub const EPS: f64 = 1e-4;

/// A full model small enough to finite-difference every parameter.
pub fn tiny_config() -> ModelConfig {
    ModelConfig {
        image_height: 8,
        image_width: 8,
        patch_size: 4,
        d_vision: 8,
        d_text: 8,
        d_fused: 8,
        d_decoder: 8,
        vision_layers: 1,
        vision_heads: 2,
        text_layers: 1,
        text_heads: 2,
        fusion_layers: 1,
        fusion_heads: 2,
        decoder_layers: 1,
        decoder_heads: 2,
        ffn_multiplier: 2,
        vocab_size: 20,
        max_text_len: 10,
        max_report_len: 8,
        layer_norm_eps: 1e-5,
    }
}

pub fn random_tensor(shape: &[usize], rng: &mut impl Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// `|a - n| / max(|a|, |n|, 1e-6)`, maximised over elements.
pub fn max_rel_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(1e-6))
        .fold(0.0, f64::max)
}

/// Largest relative disagreement between the tape's gradient and central
/// differences for every element of every input.
pub fn gradcheck(inputs: &[Tensor], f: impl Fn(&Tape, &[Var]) -> Result<Var>) -> f64 {
    let tape = Tape::new();
    let leaves: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = f(&tape, &leaves).unwrap();
    assert!(out.value().is_scalar(), "gradcheck needs a scalar output");
    tape.backward(&out).unwrap();
    let eval = |ins: &[Tensor]| {
        let t = Tape::no_grad();
        let vs: Vec<Var> = ins.iter().map(|x| t.constant(x.clone())).collect();
        f(&t, &vs).unwrap().item()
    };
    let mut worst: f64 = 0.0;
    for (k, leaf) in leaves.iter().enumerate() {
        let analytic = tape.grad(leaf).unwrap_or_else(|| Tensor::zeros(inputs[k].shape()));
        let mut numeric = Vec::with_capacity(inputs[k].len());
        for j in 0..inputs[k].len() {
            let mut plus = inputs.to_vec();
            plus[k].data_mut()[j] += EPS;
            let mut minus = inputs.to_vec();
            minus[k].data_mut()[j] -= EPS;
            numeric.push((eval(&plus) - eval(&minus)) / (2.0 * EPS));
        }
        worst = worst.max(max_rel_error(analytic.data(), &numeric));
    }
    worst
}

/// Contracts any output with fixed random weights so it becomes a scalar
/// whose gradient exercises every output element.
pub fn contract(tape: &Tape, x: &Var, seed: u64) -> Result<Var> {
    let mut r = rng(seed);
    let w = Arc::new(random_tensor(x.shape(), &mut r));
    Ok(tape.sum(&tape.mul_const(x, &w)?))
}

/// One image with its note, report and annotations for the tiny model.
pub struct Fixture {
    pub image: ImageGrid,
    pub note: TokenSequence,
    pub target: Vec<u32>,
    pub detect: Arc<Tensor>,
    pub vocab: Vocabulary,
}

pub fn tiny_fixture(cfg: &ModelConfig) -> Fixture {
    let canvas = Canvas {
        height: cfg.image_height,
        width: cfg.image_width,
        patch_size: cfg.patch_size,
        noise: 0.02,
    };
    let placement = Placement {
        label: PathologyLabel::CalcifiedGranuloma,
        shape: Shape::Disc { cy: 2.0, cx: 6.0, radius: 1.8 },
    };
    let (image, ann) = generate_image(&[placement], canvas, 3).unwrap();
    let note = "prior tb . diabetes";
    let report = "small granuloma .";
    let vocab = build_vocab(&[note, report], cfg.vocab_size).unwrap();
    Fixture {
        image,
        note: tokenize(note, &vocab, cfg.max_text_len),
        target: target_ids(report, &vocab, cfg.max_report_len),
        detect: detection_targets(&ann, cfg.n_patches()).unwrap(),
        vocab,
    }
}

/// Every training objective summed: masked image and language modeling,
/// teacher-forced report generation and patch detection.
pub fn full_loss(tape: &Tape, params: &dyn ParamSource, fx: &Fixture, cfg: &ModelConfig) -> Result<Var> {
    let mim = mim_loss(tape, params, &fx.image, &MaskPlan::for_patches(cfg.n_patches(), 0.5, 1)?, cfg)?;
    let mlm = mlm_loss(tape, params, &fx.note, &MaskPlan::for_tokens(&fx.note, 0.3, 2)?, cfg)?;
    let vision = encode_image(tape, params, &fx.image, cfg)?;
    let caption = teacher_forced_loss(tape, params, &vision, &fx.note, &fx.target, cfg)?;
    let detect = detection_loss(tape, params, &vision, &fx.detect, cfg)?;
    let a = tape.add(&mim, &mlm)?;
    let b = tape.add(&caption, &detect)?;
    tape.add(&a, &b)
}

/// Probability that a positive outscores a negative, ties counting half,
/// by comparing every pair.
pub fn pairwise_auc(scores: &[f64], truth: &[bool]) -> f64 {
    let mut wins = 0.0;
    let mut pairs = 0.0;
    for (i, &ti) in truth.iter().enumerate() {
        if !ti {
            continue;
        }
        for (j, &tj) in truth.iter().enumerate() {
            if tj {
                continue;
            }
            pairs += 1.0;
            if scores[i] > scores[j] {
                wins += 1.0;
            } else if scores[i] == scores[j] {
                wins += 0.5;
            }
        }
    }
    wins / pairs
}

/// Exact rational precision and recall as `(numerator, denominator)` pairs.
pub fn pr_fractions(preds: &[bool], truth: &[bool]) -> ((usize, usize), (usize, usize)) {
    let tp = preds.iter().zip(truth).filter(|(&p, &t)| p && t).count();
    let predicted = preds.iter().filter(|&&p| p).count();
    let actual = truth.iter().filter(|&&t| t).count();
    ((tp, predicted), (tp, actual))
}

pub fn set_iou(a: &[usize], b: &[usize]) -> f64 {
    let a: HashSet<usize> = a.iter().copied().collect();
    let b: HashSet<usize> = b.iter().copied().collect();
    let union = a.union(&b).count();
    if union == 0 {
        return 1.0;
    }
    a.intersection(&b).count() as f64 / union as f64
}
