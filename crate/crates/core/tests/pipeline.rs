use std::fs;

use cxr_vlm::checkpoint::Checkpoint;
use cxr_vlm::dataset::{build_dataset, read_pgm, DataConfig, Dataset, Split};
use cxr_vlm::synth::{report_lexicon, PathologyLabel};
use cxr_vlm::text::split_tokens;
use cxr_vlm::train::{loss_csv, train, LossRow, Stage, TrainConfig, TrainingSet};
use cxr_vlm::{Error, ModelConfig};

fn small_data(n: usize, seed: u64) -> DataConfig {
    DataConfig {
        n,
        seed,
        ..DataConfig::default()
    }
}

#[test]
fn dataset_layout_and_contents() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_data(40, 5);
    let manifest = build_dataset(&cfg, dir.path(), 2).unwrap();
    assert_eq!(manifest.split_sizes, [32, 4, 4]);
    let ds = Dataset::load(dir.path()).unwrap();
    assert_eq!(ds.records.len(), 40);
    assert_eq!(ds.split(Split::Train).len(), 32);
    assert_eq!(ds.split(Split::Test).len(), 4);

    // Exactly round(prevalence * n) images carry each pathology.
    for label in PathologyLabel::ALL {
        let k = ds.records.iter().filter(|r| r.annotation.is_present(label)).count();
        assert_eq!(k, 10, "{label:?}");
    }
    let lexicon = report_lexicon();
    for r in &ds.records {
        let img = read_pgm(&dir.path().join(&r.image)).unwrap();
        assert_eq!((img.height(), img.width()), (64, 64));
        for tok in split_tokens(&r.report) {
            assert!(lexicon.contains(&tok));
            assert!(ds.vocab.id(&tok).is_some(), "vocabulary misses `{tok}`");
        }
    }
}

#[test]
fn datasets_depend_only_on_the_seed() {
    let (a, b, c) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    build_dataset(&small_data(30, 1), a.path(), 1).unwrap();
    build_dataset(&small_data(30, 1), b.path(), 4).unwrap();
    build_dataset(&small_data(30, 2), c.path(), 1).unwrap();
    let read = |d: &std::path::Path, f: &str| fs::read(d.join(f)).unwrap();
    for f in ["records.jsonl", "manifest.json", "vocab.txt", "images/00007.pgm"] {
        assert_eq!(read(a.path(), f), read(b.path(), f), "{f}");
    }
    assert_ne!(read(a.path(), "records.jsonl"), read(c.path(), "records.jsonl"));
}

#[test]
fn tampered_records_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    build_dataset(&small_data(10, 0), dir.path(), 1).unwrap();
    let path = dir.path().join("records.jsonl");
    let body = fs::read_to_string(&path).unwrap();
    let first_line_dropped: String = body.lines().skip(1).map(|l| format!("{l}\n")).collect();
    fs::write(&path, first_line_dropped).unwrap();
    assert!(matches!(Dataset::load(dir.path()), Err(Error::Dataset(_))));
}

fn training_fixture() -> (tempfile::TempDir, TrainingSet, Checkpoint) {
    let dir = tempfile::tempdir().unwrap();
    build_dataset(&small_data(24, 9), dir.path(), 1).unwrap();
    let ds = Dataset::load(dir.path()).unwrap();
    let cfg = ModelConfig::toy();
    let set = TrainingSet::from_dataset(&ds, Split::Train, &cfg).unwrap();
    let ckpt = Checkpoint::init(cfg, ds.vocab.clone(), 3).unwrap();
    (dir, set, ckpt)
}

fn quick(steps: u64) -> TrainConfig {
    TrainConfig {
        steps,
        batch_size: 3,
        ..TrainConfig::default()
    }
}

#[test]
fn split_runs_match_one_run() {
    let (_dir, set, fresh) = training_fixture();
    let mut whole = fresh.clone();
    let rows = train(&mut whole, Stage::Pretrain, &quick(6), &set, 1).unwrap();

    let mut part = fresh;
    let mut first = train(&mut part, Stage::Pretrain, &quick(3), &set, 1).unwrap();
    let reloaded = Checkpoint::from_bytes(&part.to_bytes().unwrap()).unwrap();
    let mut part = reloaded;
    first.extend(train(&mut part, Stage::Pretrain, &quick(3), &set, 1).unwrap());

    assert_eq!(first, rows);
    assert_eq!(part.to_bytes().unwrap(), whole.to_bytes().unwrap());
    assert_eq!(part.steps.pretrain, 6);
}

#[test]
fn loss_log_format() {
    let (_dir, set, mut ckpt) = training_fixture();
    let rows = train(&mut ckpt, Stage::Finetune, &quick(2), &set, 0).unwrap();
    let csv = loss_csv(&rows, Stage::Finetune);
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("step,stage,loss_total,loss_caption,loss_vqa,loss_detect"));
    assert!(lines.next().unwrap().starts_with("1,finetune,"));
    assert_eq!(LossRow::csv_header(Stage::Pretrain), "step,stage,loss_total,loss_mim,loss_mlm");
}

#[test]
fn disabled_components_are_skipped() {
    let (_dir, set, mut ckpt) = training_fixture();
    let before = ckpt.params.clone();
    let cfg = TrainConfig {
        w_caption: 0.0,
        w_vqa: 0.0,
        ..quick(1)
    };
    let rows = train(&mut ckpt, Stage::Finetune, &cfg, &set, 0).unwrap();
    assert_eq!(rows[0].parts[0], 0.0);
    assert_eq!(rows[0].parts[1], 0.0);
    assert!(rows[0].parts[2] > 0.0);
    // Only the detection path moves; the decoder never receives a gradient.
    assert_eq!(ckpt.params.get("decoder.head.w"), before.get("decoder.head.w"));
    assert_ne!(ckpt.params.get("heads.detect.w"), before.get("heads.detect.w"));
}

#[test]
fn pretraining_reduces_loss() {
    let (_dir, set, mut ckpt) = training_fixture();
    let cfg = TrainConfig {
        steps: 60,
        batch_size: 4,
        learning_rate: 1e-3,
        ..TrainConfig::default()
    };
    let rows = train(&mut ckpt, Stage::Pretrain, &cfg, &set, 0).unwrap();
    let head: f64 = rows[..10].iter().map(|r| r.total).sum::<f64>() / 10.0;
    let tail: f64 = rows[50..].iter().map(|r| r.total).sum::<f64>() / 10.0;
    assert!(tail < 0.7 * head, "{head} -> {tail}");
}

#[test]
fn bad_training_config_is_reported_by_field() {
    let (_dir, set, mut ckpt) = training_fixture();
    let cfg = TrainConfig {
        batch_size: 0,
        ..quick(1)
    };
    match train(&mut ckpt, Stage::Pretrain, &cfg, &set, 0) {
        Err(Error::Config { path, .. }) => assert_eq!(path, "pretrain.batch_size"),
        other => panic!("{other:?}"),
    }
}
