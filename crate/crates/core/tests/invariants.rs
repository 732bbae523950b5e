mod common;

use std::collections::BTreeSet;

use proptest::prelude::*;

use common::*;
use cxr_vlm::dataset::DataConfig;
use cxr_vlm::decoder::{decoder_logits, decoder_memory};
use cxr_vlm::fusion::fuse;
use cxr_vlm::metrics::{iou, rank_auc, roc_auc};
use cxr_vlm::objectives::{mim_loss_with_targets, MaskPlan};
use cxr_vlm::params::ParamStore;
use cxr_vlm::synth::{
    answer, report_lexicon, sample_record, vqa_lexicon_text, PathologyLabel, QuestionKind,
    PATHOLOGY_LEXICON,
};
use cxr_vlm::text::{encode_text, split_tokens, TokenSequence};
use cxr_vlm::vision::{encode_image, patchify, ImageGrid};
use cxr_vlm::{Tape, Tensor};

fn image(cfg: &cxr_vlm::ModelConfig, seed: u64) -> ImageGrid {
    let mut r = rng(seed);
    let n = cfg.image_height * cfg.image_width;
    ImageGrid::new(cfg.image_height, cfg.image_width, (0..n).map(|_| rand::Rng::random_range(&mut r, 0.0..1.0)).collect())
        .unwrap()
}

fn real_ids(cfg: &cxr_vlm::ModelConfig) -> impl Strategy<Value = Vec<u32>> {
    prop::collection::vec(6u32..cfg.vocab_size as u32, 1..cfg.max_text_len - 5)
}

fn sequence(body: &[u32]) -> TokenSequence {
    let ids = std::iter::once(cxr_vlm::text::BOS)
        .chain(body.iter().copied())
        .chain(std::iter::once(cxr_vlm::text::EOS))
        .collect();
    TokenSequence::unpadded(ids)
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 32, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn decoder_is_causal(seed in 0u64..1000, body in prop::collection::vec(0u32..20, 2..8), k in 1usize..7, swap in 0u32..20) {
        let cfg = tiny_config();
        let store = ParamStore::init(&cfg, seed);
        let t = Tape::no_grad();
        let seq = sequence(&[7, 8, 9]);
        let vision = encode_image(&t, &store, &image(&cfg, seed), &cfg).unwrap();
        let text = encode_text(&t, &store, &seq, &cfg).unwrap();
        let fused = fuse(&t, &store, &text, seq.mask(), &vision, &cfg, false).unwrap();
        let memory = decoder_memory(&t, &store, &fused, &cfg).unwrap();
        let k = k.min(body.len() - 1);
        let mut other = body.clone();
        other[k] = swap;
        let a = decoder_logits(&t, &store, &memory, &body, &cfg).unwrap();
        let b = decoder_logits(&t, &store, &memory, &other, &cfg).unwrap();
        for i in 0..k {
            for (x, y) in a.value().row(i).iter().zip(b.value().row(i)) {
                prop_assert!((x - y).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn padding_changes_nothing(seed in 0u64..1000, body in real_ids(&tiny_config()), pad in 1usize..4) {
        let cfg = tiny_config();
        let store = ParamStore::init(&cfg, seed);
        let t = Tape::no_grad();
        let seq = sequence(&body);
        let padded = seq.clone().padded(pad);
        let vision = encode_image(&t, &store, &image(&cfg, seed), &cfg).unwrap();
        let a = encode_text(&t, &store, &seq, &cfg).unwrap();
        let b = encode_text(&t, &store, &padded, &cfg).unwrap();
        let fa = fuse(&t, &store, &a, seq.mask(), &vision, &cfg, false).unwrap();
        let fb = fuse(&t, &store, &b, padded.mask(), &vision, &cfg, false).unwrap();
        for i in 0..seq.len() {
            for (x, y) in a.value().row(i).iter().zip(b.value().row(i)) {
                prop_assert!((x - y).abs() <= 1e-9);
            }
            for (x, y) in fa.embeddings.value().row(i).iter().zip(fb.embeddings.value().row(i)) {
                prop_assert!((x - y).abs() <= 1e-9);
            }
        }
        let ma = decoder_memory(&t, &store, &fa, &cfg).unwrap();
        let mb = decoder_memory(&t, &store, &fb, &cfg).unwrap();
        let ids = [1, 6, 7];
        let la = decoder_logits(&t, &store, &ma, &ids, &cfg).unwrap();
        let lb = decoder_logits(&t, &store, &mb, &ids, &cfg).unwrap();
        prop_assert!(la.value().max_abs_diff(lb.value()) <= 1e-9);
    }

    #[test]
    fn softmax_shift_invariant(vals in prop::collection::vec(-20.0f64..20.0, 12), c in -100.0f64..100.0) {
        let t = Tape::no_grad();
        let x = Tensor::new(vec![3, 4], vals).unwrap();
        let a = t.softmax(&t.constant(x.clone()), 1).unwrap();
        let b = t.softmax(&t.constant(x.map(|v| v + c)), 1).unwrap();
        prop_assert!(a.value().max_abs_diff(b.value()) <= 1e-9);
        for i in 0..3 {
            prop_assert!((a.value().row(i).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn mim_ignores_visible_targets(seed in 0u64..1000, ratio in 0.1f64..0.9) {
        let cfg = tiny_config();
        let store = ParamStore::init(&cfg, seed);
        let patches = patchify(&image(&cfg, seed), cfg.patch_size).unwrap().patches;
        let plan = MaskPlan::for_patches(cfg.n_patches(), ratio, seed).unwrap();
        let tape = Tape::new();
        let targets = tape.leaf(patches.clone());
        let loss = mim_loss_with_targets(&tape, &store, &patches, &targets, &plan, &cfg).unwrap();
        tape.backward(&loss).unwrap();
        let g = tape.grad(&targets).unwrap();
        for i in (0..cfg.n_patches()).filter(|i| !plan.indices.contains(i)) {
            prop_assert!(g.row(i).iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn auc_definitions_agree(
        pairs in prop::collection::vec((0u8..6, any::<bool>()), 2..60)
    ) {
        let scores: Vec<f64> = pairs.iter().map(|p| p.0 as f64 / 5.0).collect();
        let truth: Vec<bool> = pairs.iter().map(|p| p.1).collect();
        let (trap, _) = roc_auc(&scores, &truth).unwrap();
        let rank = rank_auc(&scores, &truth).unwrap();
        match trap.value() {
            None => prop_assert!(rank.value().is_none()),
            Some(a) => {
                prop_assert!((a - rank.value().unwrap()).abs() <= 1e-12);
                prop_assert!((a - pairwise_auc(&scores, &truth)).abs() <= 1e-12);
                prop_assert!((0.0..=1.0).contains(&a));
            }
        }
    }

    #[test]
    fn auc_ignores_monotone_rescaling(
        pairs in prop::collection::vec((0.0f64..1.0, any::<bool>()), 2..60)
    ) {
        let scores: Vec<f64> = pairs.iter().map(|p| p.0).collect();
        let truth: Vec<bool> = pairs.iter().map(|p| p.1).collect();
        let squashed: Vec<f64> = scores.iter().map(|s| (3.0 * s).exp() * 0.25 - 7.0).collect();
        let (a, _) = roc_auc(&scores, &truth).unwrap();
        let (b, _) = roc_auc(&squashed, &truth).unwrap();
        match (a.value(), b.value()) {
            (Some(x), Some(y)) => prop_assert!((x - y).abs() <= 1e-12),
            (x, y) => prop_assert_eq!(x, y),
        }
    }

    #[test]
    fn iou_is_symmetric_and_bounded(a in prop::collection::btree_set(0usize..16, 0..16), b in prop::collection::btree_set(0usize..16, 0..16)) {
        let a: Vec<usize> = a.into_iter().collect();
        let b: Vec<usize> = b.into_iter().collect();
        let ab = iou(&a, &b, 16).unwrap();
        prop_assert_eq!(ab, iou(&b, &a, 16).unwrap());
        prop_assert!((0.0..=1.0).contains(&ab));
        prop_assert_eq!(iou(&a, &a, 16).unwrap(), 1.0);
        prop_assert_eq!(ab, set_iou(&a, &b));
    }

    #[test]
    fn mask_plans_reproduce(n in 1usize..64, ratio in 0.0f64..=1.0, seed in any::<u64>()) {
        let a = MaskPlan::for_patches(n, ratio, seed).unwrap();
        prop_assert_eq!(&a, &MaskPlan::for_patches(n, ratio, seed).unwrap());
        let expected = ((ratio * n as f64).round() as usize).max(if ratio > 0.0 { 1 } else { 0 });
        prop_assert_eq!(a.indices.len(), expected);
        prop_assert!(a.indices.windows(2).all(|w| w[0] < w[1]));
        prop_assert!(a.indices.iter().all(|&i| i < n));
    }

    #[test]
    fn synthetic_text_stays_in_lexicon(seed in any::<u64>(), mask in 0u8..64) {
        let presence: [bool; 6] = std::array::from_fn(|i| mask >> i & 1 == 1);
        let canvas = DataConfig::default().canvas();
        let (img, ann, note, report) = sample_record("00000", &presence, canvas, &mut rng(seed)).unwrap();
        prop_assert_eq!(img.height(), 64);

        let lexicon = report_lexicon();
        for tok in split_tokens(&report) {
            prop_assert!(lexicon.contains(&tok), "report token `{}` outside lexicon", tok);
        }
        let vqa: BTreeSet<String> = vqa_lexicon_text().iter().flat_map(|t| split_tokens(t)).collect();
        for label in PathologyLabel::ALL {
            for kind in [QuestionKind::Presence, QuestionKind::Location] {
                for tok in split_tokens(&answer(kind, label, &ann, 4, 4)) {
                    prop_assert!(vqa.contains(&tok), "answer token `{}` outside lexicon", tok);
                }
            }
        }
        // The clinical note never names a finding.
        for tok in split_tokens(&note) {
            prop_assert!(!PATHOLOGY_LEXICON.contains(&tok.as_str()), "note leaks `{}`", tok);
        }
    }

    #[test]
    fn records_are_reproducible(seed in any::<u64>(), mask in 0u8..64) {
        let presence: [bool; 6] = std::array::from_fn(|i| mask >> i & 1 == 1);
        let canvas = DataConfig::default().canvas();
        let a = sample_record("00003", &presence, canvas, &mut rng(seed)).unwrap();
        let b = sample_record("00003", &presence, canvas, &mut rng(seed)).unwrap();
        prop_assert_eq!(a.0, b.0);
        prop_assert_eq!(&a.1, &b.1);
        prop_assert_eq!(a.2, b.2);
        prop_assert_eq!(a.3, b.3);
        for label in PathologyLabel::ALL {
            prop_assert_eq!(a.1.is_present(label), presence[label.code()]);
            prop_assert_eq!(a.1.is_present(label), !a.1.mask(label).is_empty());
        }
    }
}
