//! Pretraining (masked image / masked language modeling) and fine-tuning
//! (captioning, VQA, patch detection) losses.

use std::sync::Arc;

use rand::seq::IndexedRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::config::{ModelConfig, N_PATHOLOGIES};
use crate::decoder::{decoder_logits, decoder_memory};
use crate::error::{Error, Result};
use crate::fusion::fuse;
use crate::nn::Layers;
use crate::params::ParamSource;
use crate::synth::AnnotationRecord;
use crate::tensor::Tensor;
use crate::text::{encode_text, tokenize, TokenSequence, Vocabulary, BOS, EOS, MASK};
use crate::vision::{check_image, encode_image, encode_patches, patchify, ImageGrid};

/// Positions hidden from the model for one masked-modeling example.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskPlan {
    /// Sorted, unique.
    pub indices: Vec<usize>,
    pub seed: u64,
}

impl MaskPlan {
    /// Draws `round(ratio · |candidates|)` candidates (at least one when
    /// `ratio > 0` and candidates exist) from a stream seeded by `seed`.
    pub fn sample(candidates: &[usize], ratio: f64, seed: u64) -> Result<Self> {
        if !(0.0..=1.0).contains(&ratio) {
            return Err(Error::contract(format!("mask ratio {ratio} outside [0, 1]")));
        }
        let total = candidates.len();
        let mut k = (ratio * total as f64).round() as usize;
        if ratio > 0.0 && total > 0 {
            k = k.max(1);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut indices: Vec<usize> = candidates.choose_multiple(&mut rng, k).copied().collect();
        indices.sort_unstable();
        Ok(MaskPlan { indices, seed })
    }

    pub fn for_patches(n_patches: usize, ratio: f64, seed: u64) -> Result<Self> {
        let all: Vec<usize> = (0..n_patches).collect();
        Self::sample(&all, ratio, seed)
    }

    pub fn for_tokens(seq: &TokenSequence, ratio: f64, seed: u64) -> Result<Self> {
        Self::sample(&seq.maskable_positions(), ratio, seed)
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

/// Mean squared error between reconstructions of the masked patches and
/// their pixels; unmasked patches contribute nothing.
pub fn mim_loss(tape: &Tape, params: &dyn ParamSource, img: &ImageGrid, plan: &MaskPlan, cfg: &ModelConfig) -> Result<Var> {
    check_image(img, cfg)?;
    let patches = patchify(img, cfg.patch_size)?.patches;
    let targets = tape.constant(patches.clone());
    mim_loss_with_targets(tape, params, &patches, &targets, plan, cfg)
}

/// [`mim_loss`] with the reconstruction targets supplied as a tensor on the
/// tape (`n_patches × patch_dim`), so their gradient can be inspected.
pub fn mim_loss_with_targets(
    tape: &Tape,
    params: &dyn ParamSource,
    patches: &Tensor,
    targets: &Var,
    plan: &MaskPlan,
    cfg: &ModelConfig,
) -> Result<Var> {
    let n = cfg.n_patches();
    if plan.is_empty() {
        return Err(Error::contract("masked image modeling needs at least one masked patch"));
    }
    if let Some(&bad) = plan.indices.iter().find(|&&i| i >= n) {
        return Err(Error::contract(format!("masked patch {bad} outside a grid of {n}")));
    }
    let encoded = encode_patches(tape, params, patches, &plan.indices, cfg)?;
    let picked = tape.gather_rows(&encoded, &plan.indices)?;
    let layers = Layers::new(tape, params, cfg.layer_norm_eps);
    let recon = layers.linear("heads.mim", &picked)?;
    let truth = tape.gather_rows(targets, &plan.indices)?;
    tape.mse(&recon, &truth)
}

/// Vocabulary logits (`masked × vocab`) at the masked positions, with those
/// positions replaced by MASK before encoding.
pub fn mlm_logits(tape: &Tape, params: &dyn ParamSource, seq: &TokenSequence, plan: &MaskPlan, cfg: &ModelConfig) -> Result<Var> {
    let maskable = seq.maskable_positions();
    if maskable.is_empty() {
        return Err(Error::contract("text has no maskable positions"));
    }
    if plan.is_empty() {
        return Err(Error::contract("masked language modeling needs at least one masked token"));
    }
    if let Some(&bad) = plan.indices.iter().find(|i| !maskable.contains(i)) {
        return Err(Error::contract(format!(
            "position {bad} is padding or a reserved token and cannot be masked"
        )));
    }
    let mut ids = seq.ids().to_vec();
    for &i in &plan.indices {
        ids[i] = MASK;
    }
    let n_real = seq.real_len();
    let masked = TokenSequence::unpadded(ids[..n_real].to_vec()).padded(seq.len() - n_real);
    let encoded = encode_text(tape, params, &masked, cfg)?;
    let picked = tape.gather_rows(&encoded, &plan.indices)?;
    Layers::new(tape, params, cfg.layer_norm_eps).linear("heads.mlm", &picked)
}

/// Cross-entropy of the original ids at the masked positions.
pub fn mlm_loss(tape: &Tape, params: &dyn ParamSource, seq: &TokenSequence, plan: &MaskPlan, cfg: &ModelConfig) -> Result<Var> {
    let logits = mlm_logits(tape, params, seq, plan, cfg)?;
    let targets: Vec<usize> = plan.indices.iter().map(|&i| seq.ids()[i] as usize).collect();
    tape.cross_entropy(&logits, &targets, usize::MAX)
}

/// One teacher-forced generation example: an image, its conditioning text
/// and the target ids (ending in EOS).
#[derive(Clone, Debug, PartialEq)]
pub struct TeacherForced {
    pub image: ImageGrid,
    pub text: TokenSequence,
    pub target: Vec<u32>,
}

/// Target ids for generated text: its tokens then EOS, truncated so the
/// decoder input (BOS plus all but the last target) fits `max_len`.
pub fn target_ids(text: &str, vocab: &Vocabulary, max_len: usize) -> Vec<u32> {
    let mut ids = vocab.encode(text);
    ids.truncate(max_len.saturating_sub(1));
    ids.push(EOS);
    ids
}

/// Conditioning text for a question: the note, then SEP and the question.
pub fn vqa_text(note: &str, question: &str) -> String {
    if question.trim().is_empty() {
        note.to_string()
    } else {
        format!("{note} [SEP] {question}")
    }
}

pub fn caption_example(image: ImageGrid, note: &str, report: &str, vocab: &Vocabulary, cfg: &ModelConfig) -> TeacherForced {
    TeacherForced {
        image,
        text: tokenize(note, vocab, cfg.max_text_len).trimmed(),
        target: target_ids(report, vocab, cfg.max_report_len),
    }
}

pub fn vqa_example(
    image: ImageGrid,
    note: &str,
    question: &str,
    answer: &str,
    vocab: &Vocabulary,
    cfg: &ModelConfig,
) -> TeacherForced {
    caption_example(image, &vqa_text(note, question), answer, vocab, cfg)
}

/// Teacher-forced cross-entropy of `target` given precomputed visual embeddings.
pub fn teacher_forced_loss(
    tape: &Tape,
    params: &dyn ParamSource,
    vision: &Var,
    text: &TokenSequence,
    target: &[u32],
    cfg: &ModelConfig,
) -> Result<Var> {
    if target.is_empty() {
        return Err(Error::contract("reference sequence is empty"));
    }
    if target.len() > cfg.max_report_len {
        return Err(Error::contract(format!(
            "reference of {} tokens exceeds max_report_len {}",
            target.len(),
            cfg.max_report_len
        )));
    }
    let t = encode_text(tape, params, text, cfg)?;
    let fused = fuse(tape, params, &t, text.mask(), vision, cfg, false)?;
    let memory = decoder_memory(tape, params, &fused, cfg)?;
    let mut input = Vec::with_capacity(target.len());
    input.push(BOS);
    input.extend_from_slice(&target[..target.len() - 1]);
    let logits = decoder_logits(tape, params, &memory, &input, cfg)?;
    let targets: Vec<usize> = target.iter().map(|&i| i as usize).collect();
    tape.cross_entropy(&logits, &targets, usize::MAX)
}

/// Mean teacher-forced report loss over a batch.
pub fn caption_loss(tape: &Tape, params: &dyn ParamSource, batch: &[TeacherForced], cfg: &ModelConfig) -> Result<Var> {
    if batch.is_empty() {
        return Err(Error::contract("empty batch"));
    }
    let mut total: Option<Var> = None;
    for ex in batch {
        let vision = encode_image(tape, params, &ex.image, cfg)?;
        let loss = teacher_forced_loss(tape, params, &vision, &ex.text, &ex.target, cfg)?;
        total = Some(match total {
            None => loss,
            Some(t) => tape.add(&t, &loss)?,
        });
    }
    Ok(tape.scale(&total.expect("nonempty batch"), 1.0 / batch.len() as f64))
}

/// Answer loss; identical machinery to [`caption_loss`], the question lives
/// in the conditioning text (see [`vqa_example`]).
pub fn vqa_loss(tape: &Tape, params: &dyn ParamSource, batch: &[TeacherForced], cfg: &ModelConfig) -> Result<Var> {
    caption_loss(tape, params, batch, cfg)
}

/// Per-patch pathology logits (`n_patches × 6`) from visual embeddings.
pub fn detection_logits(tape: &Tape, params: &dyn ParamSource, vision: &Var, cfg: &ModelConfig) -> Result<Var> {
    Layers::new(tape, params, cfg.layer_norm_eps).linear("heads.detect", vision)
}

/// `n_patches × 6` 0/1 matrix of the annotation's patch masks.
pub fn detection_targets(ann: &AnnotationRecord, n_patches: usize) -> Result<Arc<Tensor>> {
    let mut t = Tensor::zeros(&[n_patches, N_PATHOLOGIES]);
    for (k, mask) in ann.masks.iter().enumerate() {
        for &p in mask {
            if p >= n_patches {
                return Err(Error::contract(format!("mask patch {p} outside a grid of {n_patches}")));
            }
            t.data_mut()[p * N_PATHOLOGIES + k] = 1.0;
        }
    }
    Ok(Arc::new(t))
}

/// Mean binary cross-entropy over every patch and pathology.
pub fn detection_loss(
    tape: &Tape,
    params: &dyn ParamSource,
    vision: &Var,
    targets: &Arc<Tensor>,
    cfg: &ModelConfig,
) -> Result<Var> {
    let logits = detection_logits(tape, params, vision, cfg)?;
    tape.bce_with_logits(&logits, targets)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamStore;
    use crate::text::build_vocab;

    fn small() -> ModelConfig {
        ModelConfig {
            image_height: 16,
            image_width: 32,
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
            vocab_size: 32,
            max_text_len: 16,
            max_report_len: 8,
            ..ModelConfig::toy()
        }
    }

    #[test]
    fn plan_counts() {
        let p = MaskPlan::for_patches(16, 0.25, 3).unwrap();
        assert_eq!(p.indices.len(), 4);
        assert!(p.indices.windows(2).all(|w| w[0] < w[1]));
        assert_eq!(p, MaskPlan::for_patches(16, 0.25, 3).unwrap());
        assert_eq!(MaskPlan::for_patches(16, 0.01, 3).unwrap().indices.len(), 1);
        assert!(MaskPlan::for_patches(16, 0.0, 3).unwrap().is_empty());
        assert!(MaskPlan::for_patches(16, 1.5, 3).is_err());
    }

    #[test]
    fn empty_mim_plan_rejected() {
        let cfg = small();
        let store = ParamStore::init(&cfg, 0);
        let img = ImageGrid::filled(16, 32, 0.5).unwrap();
        let plan = MaskPlan::for_patches(2, 0.0, 0).unwrap();
        let tape = Tape::no_grad();
        assert!(mim_loss(&tape, &store, &img, &plan, &cfg).is_err());
    }

    #[test]
    fn planted_reconstruction_has_zero_loss() {
        let cfg = ModelConfig {
            image_width: 16,
            ..small()
        };
        let mut store = ParamStore::init(&cfg, 0);
        let img = ImageGrid::new(16, 16, (0..256).map(|i| i as f64 / 255.0).collect()).unwrap();
        store.set("heads.mim.w", Tensor::zeros(&[8, 256])).unwrap();
        store.set("heads.mim.b", Tensor::new(vec![256], img.pixels().to_vec()).unwrap()).unwrap();
        let plan = MaskPlan::for_patches(1, 1.0, 0).unwrap();
        let tape = Tape::no_grad();
        assert_eq!(mim_loss(&tape, &store, &img, &plan, &cfg).unwrap().item(), 0.0);
    }

    #[test]
    fn uniform_mlm_head_gives_log_vocab() {
        let cfg = small();
        let mut store = ParamStore::init(&cfg, 0);
        store.set("heads.mlm.w", Tensor::zeros(&[8, 32])).unwrap();
        let vocab = build_vocab(&["a b c"], 32).unwrap();
        let seq = tokenize("a b c", &vocab, 8);
        let plan = MaskPlan::for_tokens(&seq, 0.5, 1).unwrap();
        let tape = Tape::no_grad();
        let loss = mlm_loss(&tape, &store, &seq, &plan, &cfg).unwrap().item();
        assert!((loss - 32f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn mlm_rejects_bad_positions() {
        let cfg = small();
        let store = ParamStore::init(&cfg, 0);
        let vocab = build_vocab(&["a"], 32).unwrap();
        let tape = Tape::no_grad();
        let empty = tokenize("", &vocab, 8);
        let plan = MaskPlan { indices: vec![0], seed: 0 };
        assert!(mlm_loss(&tape, &store, &empty, &plan, &cfg).is_err());
        let seq = tokenize("a", &vocab, 8);
        assert!(mlm_loss(&tape, &store, &seq, &plan, &cfg).is_err());
    }

    #[test]
    fn empty_question_is_caption() {
        let cfg = small();
        let vocab = build_vocab(&["prior tb yes small cavity"], 32).unwrap();
        let img = ImageGrid::filled(16, 32, 0.3).unwrap();
        let a = caption_example(img.clone(), "prior tb", "small cavity", &vocab, &cfg);
        let b = vqa_example(img, "prior tb", "", "small cavity", &vocab, &cfg);
        assert_eq!(a, b);
        let store = ParamStore::init(&cfg, 1);
        let tape = Tape::no_grad();
        let la = caption_loss(&tape, &store, &[a], &cfg).unwrap().item();
        let lb = vqa_loss(&tape, &store, &[b], &cfg).unwrap().item();
        assert_eq!(la, lb);
    }

    #[test]
    fn empty_reference_rejected() {
        let cfg = small();
        let store = ParamStore::init(&cfg, 1);
        let vocab = build_vocab(&["a"], 32).unwrap();
        let mut ex = caption_example(ImageGrid::filled(16, 32, 0.3).unwrap(), "a", "", &vocab, &cfg);
        assert_eq!(ex.target, vec![EOS]);
        ex.target.clear();
        let tape = Tape::no_grad();
        assert!(caption_loss(&tape, &store, &[ex], &cfg).is_err());
    }
}
