//! The two-stage training loop.
//!
//! Each step draws its batch and mask plans from a ChaCha stream keyed by
//! `(seed, stage, global step)`, so a run split across several invocations
//! matches an uninterrupted one. Per-example gradients are computed in
//! parallel and summed in batch order, which keeps results independent of
//! the worker count.

use std::collections::HashMap;
use std::fmt;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::checkpoint::Checkpoint;
use crate::config::ModelConfig;
use crate::dataset::{Dataset, Split};
use crate::error::{Error, Result};
use crate::objectives::{
    detection_loss, detection_targets, mim_loss, mlm_loss, target_ids, teacher_forced_loss, vqa_text, MaskPlan,
};
use crate::optim::AdamConfig;
use crate::params::ParamStore;
use crate::synth::{answer, question, AnnotationRecord, PathologyLabel, QuestionKind};
use crate::tensor::Tensor;
use crate::text::{tokenize, TokenSequence, Vocabulary};
use crate::vision::{encode_image, ImageGrid};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Optimizer steps to take in this invocation.
    pub steps: u64,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub mim_ratio: f64,
    pub mlm_ratio: f64,
    pub w_mim: f64,
    pub w_mlm: f64,
    pub w_caption: f64,
    pub w_vqa: f64,
    pub w_detect: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let adam = AdamConfig::default();
        TrainConfig {
            steps: 2000,
            batch_size: 16,
            learning_rate: adam.learning_rate,
            beta1: adam.beta1,
            beta2: adam.beta2,
            epsilon: adam.epsilon,
            mim_ratio: 0.25,
            mlm_ratio: 0.15,
            w_mim: 1.0,
            w_mlm: 1.0,
            w_caption: 1.0,
            w_vqa: 1.0,
            w_detect: 1.0,
        }
    }
}

impl TrainConfig {
    pub fn validate_at(&self, path: &str) -> Result<()> {
        let field = |f: &str| if path.is_empty() { f.to_string() } else { format!("{path}.{f}") };
        if self.batch_size == 0 {
            return Err(Error::config(field("batch_size"), "must be at least 1"));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config(field("learning_rate"), "must be finite and non-negative"));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::config(field(name), "must lie in [0, 1)"));
            }
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::config(field("epsilon"), "must be positive"));
        }
        for (name, r) in [("mim_ratio", self.mim_ratio), ("mlm_ratio", self.mlm_ratio)] {
            if !(0.0..=1.0).contains(&r) {
                return Err(Error::config(field(name), "must lie in [0, 1]"));
            }
        }
        for (name, w) in [
            ("w_mim", self.w_mim),
            ("w_mlm", self.w_mlm),
            ("w_caption", self.w_caption),
            ("w_vqa", self.w_vqa),
            ("w_detect", self.w_detect),
        ] {
            if !(w >= 0.0 && w.is_finite()) {
                return Err(Error::config(field(name), "must be finite and non-negative"));
            }
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.learning_rate,
            beta1: self.beta1,
            beta2: self.beta2,
            epsilon: self.epsilon,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Pretrain,
    Finetune,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Pretrain => "pretrain",
            Stage::Finetune => "finetune",
        }
    }

    /// Loss components logged for this stage.
    pub fn components(self) -> &'static [&'static str] {
        match self {
            Stage::Pretrain => &["mim", "mlm"],
            Stage::Finetune => &["caption", "vqa", "detect"],
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// One image with everything the objectives need, tokenized once.
#[derive(Clone, Debug)]
pub struct TrainItem {
    pub image: ImageGrid,
    pub annotation: AnnotationRecord,
    pub note: String,
    pub note_tokens: TokenSequence,
    pub report_target: Vec<u32>,
    pub detect_targets: Arc<Tensor>,
}

#[derive(Clone, Debug)]
pub struct TrainingSet {
    pub items: Vec<TrainItem>,
    pub vocab: Vocabulary,
}

impl TrainingSet {
    pub fn new(
        examples: Vec<(ImageGrid, AnnotationRecord, String, String)>,
        vocab: &Vocabulary,
        cfg: &ModelConfig,
    ) -> Result<Self> {
        if examples.is_empty() {
            return Err(Error::Dataset("no training examples".into()));
        }
        let items = examples
            .into_iter()
            .map(|(image, annotation, note, report)| {
                Ok(TrainItem {
                    note_tokens: tokenize(&note, vocab, cfg.max_text_len).trimmed(),
                    report_target: target_ids(&report, vocab, cfg.max_report_len),
                    detect_targets: detection_targets(&annotation, cfg.n_patches())?,
                    image,
                    annotation,
                    note,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(TrainingSet {
            items,
            vocab: vocab.clone(),
        })
    }

    pub fn from_dataset(ds: &Dataset, split: Split, cfg: &ModelConfig) -> Result<Self> {
        let records = ds.split(split);
        if records.is_empty() {
            return Err(Error::Dataset(format!("split {split:?} is empty")));
        }
        let examples = records
            .into_iter()
            .map(|r| Ok((ds.image(r)?, r.annotation.clone(), r.note.clone(), r.report.clone())))
            .collect::<Result<Vec<_>>>()?;
        Self::new(examples, &ds.vocab, cfg)
    }
}

/// Losses of one optimizer step, averaged over the batch.
#[derive(Clone, Debug, PartialEq)]
pub struct LossRow {
    /// Global step within the stage, starting at 1.
    pub step: u64,
    pub stage: Stage,
    pub total: f64,
    /// Unweighted component losses in [`Stage::components`] order; 0 when a
    /// component's weight is 0.
    pub parts: Vec<f64>,
}

impl LossRow {
    pub fn csv_header(stage: Stage) -> String {
        let mut cols = vec!["step".to_string(), "stage".into(), "loss_total".into()];
        cols.extend(stage.components().iter().map(|c| format!("loss_{c}")));
        cols.join(",")
    }

    pub fn csv_line(&self) -> String {
        let mut cols = vec![self.step.to_string(), self.stage.name().to_string(), self.total.to_string()];
        cols.extend(self.parts.iter().map(f64::to_string));
        cols.join(",")
    }
}

pub fn loss_csv(rows: &[LossRow], stage: Stage) -> String {
    let mut out = LossRow::csv_header(stage);
    out.push('\n');
    for r in rows {
        out.push_str(&r.csv_line());
        out.push('\n');
    }
    out
}

struct ItemOutcome {
    grads: HashMap<String, Tensor>,
    total: f64,
    parts: Vec<f64>,
}

fn accumulate(tape: &Tape, total: &mut Option<Var>, loss: &Var, w: f64) -> Result<()> {
    let scaled = tape.scale(loss, w);
    *total = Some(match total.take() {
        None => scaled,
        Some(t) => tape.add(&t, &scaled)?,
    });
    Ok(())
}

fn pretrain_item(
    params: &ParamStore,
    item: &TrainItem,
    tcfg: &TrainConfig,
    cfg: &ModelConfig,
    rng: &mut ChaCha8Rng,
) -> Result<ItemOutcome> {
    let tape = Tape::new();
    let bound = params.bind();
    let mut total = None;
    let mut parts = vec![0.0; 2];
    let mim_plan = MaskPlan::for_patches(cfg.n_patches(), tcfg.mim_ratio, rng.random())?;
    if tcfg.w_mim != 0.0 && !mim_plan.is_empty() {
        let l = mim_loss(&tape, &bound, &item.image, &mim_plan, cfg)?;
        parts[0] = l.item();
        accumulate(&tape, &mut total, &l, tcfg.w_mim)?;
    }
    let mlm_plan = MaskPlan::for_tokens(&item.note_tokens, tcfg.mlm_ratio, rng.random())?;
    if tcfg.w_mlm != 0.0 && !mlm_plan.is_empty() {
        let l = mlm_loss(&tape, &bound, &item.note_tokens, &mlm_plan, cfg)?;
        parts[1] = l.item();
        accumulate(&tape, &mut total, &l, tcfg.w_mlm)?;
    }
    finish(&tape, &bound, total, parts)
}

fn finetune_item(
    params: &ParamStore,
    item: &TrainItem,
    vocab: &Vocabulary,
    tcfg: &TrainConfig,
    cfg: &ModelConfig,
    rng: &mut ChaCha8Rng,
) -> Result<ItemOutcome> {
    let tape = Tape::new();
    let bound = params.bind();
    let mut total = None;
    let mut parts = vec![0.0; 3];
    let label = PathologyLabel::ALL[rng.random_range(0..PathologyLabel::ALL.len())];
    let kind = if rng.random_bool(0.5) {
        QuestionKind::Presence
    } else {
        QuestionKind::Location
    };
    let vision = encode_image(&tape, &bound, &item.image, cfg)?;
    if tcfg.w_caption != 0.0 {
        let l = teacher_forced_loss(&tape, &bound, &vision, &item.note_tokens, &item.report_target, cfg)?;
        parts[0] = l.item();
        accumulate(&tape, &mut total, &l, tcfg.w_caption)?;
    }
    if tcfg.w_vqa != 0.0 {
        let q = question(kind, label);
        let a = answer(kind, label, &item.annotation, cfg.grid_rows(), cfg.grid_cols());
        let text = tokenize(&vqa_text(&item.note, &q), vocab, cfg.max_text_len).trimmed();
        let target = target_ids(&a, vocab, cfg.max_report_len);
        let l = teacher_forced_loss(&tape, &bound, &vision, &text, &target, cfg)?;
        parts[1] = l.item();
        accumulate(&tape, &mut total, &l, tcfg.w_vqa)?;
    }
    if tcfg.w_detect != 0.0 {
        let l = detection_loss(&tape, &bound, &vision, &item.detect_targets, cfg)?;
        parts[2] = l.item();
        accumulate(&tape, &mut total, &l, tcfg.w_detect)?;
    }
    finish(&tape, &bound, total, parts)
}

fn finish(tape: &Tape, bound: &crate::params::Bound<'_>, total: Option<Var>, parts: Vec<f64>) -> Result<ItemOutcome> {
    let Some(total) = total else {
        return Ok(ItemOutcome {
            grads: HashMap::new(),
            total: 0.0,
            parts,
        });
    };
    let value = total.item();
    if !value.is_finite() {
        return Ok(ItemOutcome {
            grads: HashMap::new(),
            total: value,
            parts,
        });
    }
    tape.backward(&total)?;
    Ok(ItemOutcome {
        grads: bound.gradients(tape),
        total: value,
        parts,
    })
}

/// Runs `tcfg.steps` optimizer steps of `stage`, updating `ckpt` in place,
/// and returns the per-step losses.
pub fn train(
    ckpt: &mut Checkpoint,
    stage: Stage,
    tcfg: &TrainConfig,
    data: &TrainingSet,
    seed: u64,
) -> Result<Vec<LossRow>> {
    tcfg.validate_at(stage.name())?;
    if data.items.is_empty() {
        return Err(Error::Dataset("no training examples".into()));
    }
    let cfg = ckpt.config.clone();
    let hp = tcfg.adam();
    let stage_tag: u64 = match stage {
        Stage::Pretrain => 1,
        Stage::Finetune => 2,
    };
    let mut rows = Vec::with_capacity(tcfg.steps as usize);
    for _ in 0..tcfg.steps {
        let done = match stage {
            Stage::Pretrain => ckpt.steps.pretrain,
            Stage::Finetune => ckpt.steps.finetune,
        };
        let step = done + 1;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream((stage_tag << 56) | step);
        let picks: Vec<(usize, u64)> = (0..tcfg.batch_size)
            .map(|_| (rng.random_range(0..data.items.len()), rng.random()))
            .collect();
        let params = &ckpt.params;
        let outcomes: Vec<ItemOutcome> = picks
            .par_iter()
            .map(|&(i, s)| {
                let mut item_rng = ChaCha8Rng::seed_from_u64(s);
                let item = &data.items[i];
                match stage {
                    Stage::Pretrain => pretrain_item(params, item, tcfg, &cfg, &mut item_rng),
                    Stage::Finetune => finetune_item(params, item, &data.vocab, tcfg, &cfg, &mut item_rng),
                }
            })
            .collect::<Result<Vec<_>>>()?;

        let b = tcfg.batch_size as f64;
        let total = outcomes.iter().map(|o| o.total).sum::<f64>() / b;
        let mut parts = vec![0.0; stage.components().len()];
        for o in &outcomes {
            for (p, v) in parts.iter_mut().zip(&o.parts) {
                *p += v / b;
            }
        }
        if !total.is_finite() || parts.iter().any(|p| !p.is_finite()) {
            return Err(Error::Diverged {
                step,
                detail: format!("{stage} loss became {total} (components {parts:?})"),
            });
        }
        let mut grads: HashMap<String, Tensor> = HashMap::new();
        for o in outcomes {
            for (name, g) in o.grads {
                match grads.get_mut(&name) {
                    Some(acc) => {
                        for (a, v) in acc.data_mut().iter_mut().zip(g.data()) {
                            *a += v;
                        }
                    }
                    None => {
                        grads.insert(name, g);
                    }
                }
            }
        }
        for g in grads.values_mut() {
            for v in g.data_mut() {
                *v /= b;
            }
        }
        ckpt.optimizer.step(&mut ckpt.params, &grads, &hp)?;
        match stage {
            Stage::Pretrain => ckpt.steps.pretrain = step,
            Stage::Finetune => ckpt.steps.finetune = step,
        }
        rows.push(LossRow {
            step,
            stage,
            total,
            parts,
        });
    }
    Ok(rows)
}
