//! Patch detection inference and the evaluation suite: precision, recall,
//! ROC-AUC, IoU, and their JSON / CSV / table renderings.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::config::{ModelConfig, N_PATHOLOGIES};
use crate::error::{Error, Result};
use crate::objectives::detection_logits;
use crate::params::ParamSource;
use crate::synth::{AnnotationRecord, PathologyLabel};
use crate::tensor::Tensor;
use crate::vision::{encode_image, ImageGrid};

/// Default decision threshold on probabilities (inclusive).
pub const DEFAULT_THRESHOLD: f64 = 0.5;

/// Per-pathology, per-patch probabilities (`6 × n_patches`).
#[derive(Clone, Debug, PartialEq)]
pub struct PatchPredictions {
    pub probs: Tensor,
}

impl PatchPredictions {
    pub fn n_patches(&self) -> usize {
        self.probs.last_dim()
    }

    pub fn row(&self, label: PathologyLabel) -> &[f64] {
        self.probs.row(label.code())
    }

    /// Image-level score: the highest patch probability.
    pub fn image_score(&self, label: PathologyLabel) -> f64 {
        self.row(label).iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    /// Patches whose probability reaches `threshold`.
    pub fn mask(&self, label: PathologyLabel, threshold: f64) -> Vec<usize> {
        self.row(label)
            .iter()
            .enumerate()
            .filter(|(_, &p)| p >= threshold)
            .map(|(i, _)| i)
            .collect()
    }
}

/// Sigmoid of the detection head over the visual encoder's patch outputs.
/// The clinical note plays no part in detection.
pub fn detect(params: &dyn ParamSource, img: &ImageGrid, cfg: &ModelConfig) -> Result<PatchPredictions> {
    let tape = Tape::no_grad();
    let vision = encode_image(&tape, params, img, cfg)?;
    let logits = detection_logits(&tape, params, &vision, cfg)?;
    let probs = tape.sigmoid(&logits);
    let (n, k) = probs.value().dims2()?;
    let src = probs.value().data();
    let t = Tensor::from_fn(&[k, n], |i| src[(i % n) * k + i / n]);
    Ok(PatchPredictions { probs: t })
}

/// A metric value or the reason it is undefined.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Metric {
    Value(f64),
    Undefined { undefined: String },
}

impl Metric {
    pub fn undefined(reason: impl Into<String>) -> Self {
        Metric::Undefined {
            undefined: reason.into(),
        }
    }

    pub fn value(&self) -> Option<f64> {
        match self {
            Metric::Value(v) => Some(*v),
            Metric::Undefined { .. } => None,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counts {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub tn: usize,
}

pub fn confusion(preds: &[bool], truth: &[bool]) -> Result<Counts> {
    if preds.len() != truth.len() {
        return Err(Error::contract(format!(
            "{} predictions for {} labels",
            preds.len(),
            truth.len()
        )));
    }
    let mut c = Counts::default();
    for (&p, &t) in preds.iter().zip(truth) {
        match (p, t) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
            (false, false) => c.tn += 1,
        }
    }
    Ok(c)
}

/// Precision `TP/(TP+FP)` and recall `TP/(TP+FN)`; undefined when the
/// denominator is zero.
pub fn precision_recall(preds: &[bool], truth: &[bool]) -> Result<(Metric, Metric, Counts)> {
    let c = confusion(preds, truth)?;
    let precision = if c.tp + c.fp == 0 {
        Metric::undefined("no positive predictions")
    } else {
        Metric::Value(c.tp as f64 / (c.tp + c.fp) as f64)
    };
    let recall = if c.tp + c.fn_ == 0 {
        Metric::undefined("no positive cases")
    } else {
        Metric::Value(c.tp as f64 / (c.tp + c.fn_) as f64)
    };
    Ok((precision, recall, c))
}

/// ROC points from `(0, 0)` to `(1, 1)`, one per distinct score threshold.
#[derive(Clone, Debug, PartialEq)]
pub struct RocCurve {
    /// `(fpr, tpr)` pairs.
    pub points: Vec<(f64, f64)>,
    /// Threshold of each point; the first is `+inf`.
    pub thresholds: Vec<f64>,
}

fn check_scores(scores: &[f64], truth: &[bool]) -> Result<(usize, usize)> {
    if scores.len() != truth.len() {
        return Err(Error::contract(format!("{} scores for {} labels", scores.len(), truth.len())));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::contract("NaN score"));
    }
    let pos = truth.iter().filter(|&&t| t).count();
    Ok((pos, truth.len() - pos))
}

/// Trapezoidal area under the ROC built over every distinct score.
pub fn roc_auc(scores: &[f64], truth: &[bool]) -> Result<(Metric, Option<RocCurve>)> {
    let (p, n) = check_scores(scores, truth)?;
    if p == 0 || n == 0 {
        let which = if p == 0 { "no positive cases" } else { "no negative cases" };
        return Ok((Metric::undefined(format!("AUC needs both classes: {which}")), None));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut points = vec![(0.0, 0.0)];
    let mut thresholds = vec![f64::INFINITY];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        while i < order.len() && scores[order[i]] == s {
            if truth[order[i]] {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        points.push((fp as f64 / n as f64, tp as f64 / p as f64));
        thresholds.push(s);
    }
    let auc = points
        .windows(2)
        .map(|w| (w[1].0 - w[0].0) * (w[1].1 + w[0].1) / 2.0)
        .sum::<f64>();
    Ok((Metric::Value(auc), Some(RocCurve { points, thresholds })))
}

/// Mann-Whitney statistic from mid-ranks: the probability that a random
/// positive outscores a random negative, ties counting one half.
pub fn rank_auc(scores: &[f64], truth: &[bool]) -> Result<Metric> {
    let (p, n) = check_scores(scores, truth)?;
    if p == 0 || n == 0 {
        return Ok(Metric::undefined("AUC needs both classes"));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            j += 1;
        }
        let mid = (i + 1 + j) as f64 / 2.0;
        rank_sum += mid * order[i..j].iter().filter(|&&k| truth[k]).count() as f64;
        i = j;
    }
    let u = rank_sum - (p * (p + 1)) as f64 / 2.0;
    Ok(Metric::Value(u / (p * n) as f64))
}

/// `|A∩B| / |A∪B|` over patch indices; 1 when both are empty.
pub fn iou(pred: &[usize], truth: &[usize], n_patches: usize) -> Result<f64> {
    if let Some(&bad) = pred.iter().chain(truth).find(|&&i| i >= n_patches) {
        return Err(Error::contract(format!("patch {bad} outside a grid of {n_patches}")));
    }
    let a: BTreeSet<usize> = pred.iter().copied().collect();
    let b: BTreeSet<usize> = truth.iter().copied().collect();
    let union = a.union(&b).count();
    if union == 0 {
        return Ok(1.0);
    }
    Ok(a.intersection(&b).count() as f64 / union as f64)
}

/// Where patch probabilities come from during evaluation.
pub enum Predictor<'a> {
    Model(&'a (dyn ParamSource + Sync)),
    /// Reads the ground-truth masks: probability 1 inside, 0 outside.
    Oracle,
    /// The same probability everywhere.
    Constant(f64),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PathologyMetrics {
    pub pathology: String,
    pub code: usize,
    pub precision: Metric,
    pub recall: Metric,
    pub auc: Metric,
    /// Mean over images where the pathology is present.
    pub iou: Metric,
    pub counts: Counts,
    pub n_present: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub split: String,
    pub threshold: f64,
    pub n_images: usize,
    pub pathologies: Vec<PathologyMetrics>,
}

/// A report with its ROC curves.
#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub report: MetricsReport,
    pub curves: Vec<(PathologyLabel, RocCurve)>,
}

/// Scores every image and computes per-pathology metrics. Image-level
/// decisions and prediction masks both use `score >= threshold`.
pub fn evaluate(
    predictor: &Predictor<'_>,
    images: &[(ImageGrid, AnnotationRecord)],
    cfg: &ModelConfig,
    threshold: f64,
    split: &str,
) -> Result<Evaluation> {
    if images.is_empty() {
        return Err(Error::Dataset(format!("split `{split}` has no images")));
    }
    let n_patches = cfg.n_patches();
    let preds: Vec<PatchPredictions> = images
        .par_iter()
        .map(|(img, ann)| match predictor {
            Predictor::Model(p) => detect(*p, img, cfg),
            Predictor::Oracle => {
                let mut probs = Tensor::zeros(&[N_PATHOLOGIES, n_patches]);
                for (k, mask) in ann.masks.iter().enumerate() {
                    for &i in mask {
                        probs.data_mut()[k * n_patches + i] = 1.0;
                    }
                }
                Ok(PatchPredictions { probs })
            }
            Predictor::Constant(c) => Ok(PatchPredictions {
                probs: Tensor::full(&[N_PATHOLOGIES, n_patches], *c),
            }),
        })
        .collect::<Result<Vec<_>>>()?;

    let mut rows = Vec::new();
    let mut curves = Vec::new();
    for label in PathologyLabel::ALL {
        let truth: Vec<bool> = images.iter().map(|(_, a)| a.is_present(label)).collect();
        let scores: Vec<f64> = preds.iter().map(|p| p.image_score(label)).collect();
        let decisions: Vec<bool> = scores.iter().map(|&s| s >= threshold).collect();
        let (precision, recall, counts) = precision_recall(&decisions, &truth)?;
        let (auc, curve) = roc_auc(&scores, &truth)?;
        if let Some(c) = curve {
            curves.push((label, c));
        }
        let mut ious = Vec::new();
        for ((_, ann), p) in images.iter().zip(&preds) {
            if ann.is_present(label) {
                ious.push(iou(&p.mask(label, threshold), ann.mask(label), n_patches)?);
            }
        }
        let iou = if ious.is_empty() {
            Metric::undefined("pathology absent from the split")
        } else {
            Metric::Value(ious.iter().sum::<f64>() / ious.len() as f64)
        };
        rows.push(PathologyMetrics {
            pathology: label.key().to_string(),
            code: label.code(),
            precision,
            recall,
            auc,
            iou,
            counts,
            n_present: truth.iter().filter(|&&t| t).count(),
        });
    }
    Ok(Evaluation {
        report: MetricsReport {
            split: split.to_string(),
            threshold,
            n_images: images.len(),
            pathologies: rows,
        },
        curves,
    })
}

/// `pathology,threshold,fpr,tpr` rows; the opening threshold is `inf`.
pub fn roc_csv(curves: &[(PathologyLabel, RocCurve)]) -> String {
    let mut out = String::from("pathology,threshold,fpr,tpr\n");
    for (label, c) in curves {
        for (&(fpr, tpr), &t) in c.points.iter().zip(&c.thresholds) {
            let _ = writeln!(out, "{},{},{},{}", label.key(), t, fpr, tpr);
        }
    }
    out
}

/// One row of the results table, already in display units.
#[derive(Clone, Debug, PartialEq)]
pub struct TableRow {
    pub pathology: String,
    pub precision_pct: Option<f64>,
    pub recall_pct: Option<f64>,
    pub auc: Option<f64>,
    pub iou: Option<f64>,
}

impl TableRow {
    pub fn from_metrics(m: &PathologyMetrics) -> Self {
        let title = PathologyLabel::from_key(&m.pathology).map_or(m.pathology.clone(), |l| l.title().to_string());
        TableRow {
            pathology: title,
            precision_pct: m.precision.value().map(|v| v * 100.0),
            recall_pct: m.recall.value().map(|v| v * 100.0),
            auc: m.auc.value(),
            iou: m.iou.value(),
        }
    }

    fn cells(&self) -> [String; 5] {
        let f = |v: Option<f64>, digits: usize| v.map_or("--".to_string(), |v| format!("{v:.digits$}"));
        [
            self.pathology.clone(),
            f(self.precision_pct, 1),
            f(self.recall_pct, 1),
            f(self.auc, 2),
            f(self.iou, 2),
        ]
    }
}

pub const TABLE_COLUMNS: [&str; 5] = ["Pathology", "Precision (%)", "Recall (%)", "AUC", "IOU"];

/// `Name & 94.2 & 94.0 & 0.94 & 0.92 \\`
pub fn latex_row(row: &TableRow) -> String {
    format!("{} \\\\", row.cells().join(" & "))
}

/// A booktabs `tabular` with the standard five columns.
pub fn latex_table(rows: &[TableRow]) -> String {
    let header = TABLE_COLUMNS
        .iter()
        .map(|c| format!("\\textbf{{{}}}", c.replace('%', "\\%")))
        .collect::<Vec<_>>()
        .join(" & ");
    let mut out = String::from("\\begin{tabular}{lcccc}\n\\toprule\n");
    let _ = writeln!(out, "{header} \\\\");
    out.push_str("\\midrule\n");
    for r in rows {
        out.push_str(&latex_row(r));
        out.push('\n');
    }
    out.push_str("\\bottomrule\n\\end{tabular}\n");
    out
}

/// Plain-text table with aligned columns.
pub fn text_table(rows: &[TableRow]) -> String {
    let cells: Vec<[String; 5]> = rows.iter().map(TableRow::cells).collect();
    let mut widths = TABLE_COLUMNS.map(str::len);
    for r in &cells {
        for (w, c) in widths.iter_mut().zip(r) {
            *w = (*w).max(c.len());
        }
    }
    let line = |cols: [&str; 5]| {
        let mut s = format!("{:<w$}", cols[0], w = widths[0]);
        for (c, w) in cols[1..].iter().zip(&widths[1..]) {
            let _ = write!(s, "  {c:>w$}");
        }
        s.trim_end().to_string() + "\n"
    };
    let mut out = line(TABLE_COLUMNS);
    out.push_str(&"-".repeat(widths.iter().sum::<usize>() + 2 * (widths.len() - 1)));
    out.push('\n');
    for r in &cells {
        out.push_str(&line([&r[0], &r[1], &r[2], &r[3], &r[4]]));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamStore;

    #[test]
    fn precision_recall_arithmetic() {
        let preds = [true, true, true, true, false, false];
        let truth = [true, true, true, false, true, false];
        let (p, r, c) = precision_recall(&preds, &truth).unwrap();
        assert_eq!((c.tp, c.fp, c.fn_, c.tn), (3, 1, 1, 1));
        assert_eq!(p, Metric::Value(0.75));
        assert_eq!(r, Metric::Value(0.75));
    }

    #[test]
    fn all_negative_is_undefined() {
        let (p, r, _) = precision_recall(&[false; 4], &[false; 4]).unwrap();
        assert!(p.value().is_none() && r.value().is_none());
        assert!(precision_recall(&[true], &[true, false]).is_err());
    }

    #[test]
    fn auc_cases() {
        let (auc, curve) = roc_auc(&[0.9, 0.8, 0.4, 0.3], &[true, false, true, false]).unwrap();
        assert_eq!(auc, Metric::Value(0.75));
        let c = curve.unwrap();
        assert_eq!(c.points.first(), Some(&(0.0, 0.0)));
        assert_eq!(c.points.last(), Some(&(1.0, 1.0)));
        assert_eq!(roc_auc(&[0.5; 4], &[true, false, true, false]).unwrap().0, Metric::Value(0.5));
        assert_eq!(roc_auc(&[0.9, 0.1], &[true, false]).unwrap().0, Metric::Value(1.0));
        assert!(roc_auc(&[0.9, 0.1], &[true, true]).unwrap().0.value().is_none());
    }

    #[test]
    fn iou_cases() {
        let a: Vec<usize> = (0..10).collect();
        let b: Vec<usize> = (5..15).collect();
        assert_eq!(iou(&a, &b, 16).unwrap(), 5.0 / 15.0);
        assert_eq!(iou(&[], &[], 16).unwrap(), 1.0);
        assert_eq!(iou(&[1], &[], 16).unwrap(), 0.0);
        assert!(iou(&[16], &[], 16).is_err());
    }

    #[test]
    fn zero_head_predicts_one_half() {
        let cfg = ModelConfig::toy();
        let mut store = ParamStore::init(&cfg, 2);
        store.set("heads.detect.w", Tensor::zeros(&[32, 6])).unwrap();
        let img = ImageGrid::filled(64, 64, 0.4).unwrap();
        let p = detect(&store, &img, &cfg).unwrap();
        assert_eq!(p.probs.shape(), &[6, 16]);
        assert!(p.probs.data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn metric_json_shapes() {
        assert_eq!(serde_json::to_string(&Metric::Value(0.5)).unwrap(), "0.5");
        let u = Metric::undefined("no positive cases");
        let s = serde_json::to_string(&u).unwrap();
        assert_eq!(s, r#"{"undefined":"no positive cases"}"#);
        assert_eq!(serde_json::from_str::<Metric>(&s).unwrap(), u);
    }

    #[test]
    fn undefined_cells_render_as_dashes() {
        let row = TableRow {
            pathology: "Cavity".into(),
            precision_pct: None,
            recall_pct: Some(50.0),
            auc: None,
            iou: Some(1.0),
        };
        assert_eq!(latex_row(&row), "Cavity & -- & 50.0 & -- & 1.00 \\\\");
    }
}
