use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn cxr(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cxr-vlm"))
        .args(args)
        .current_dir(dir)
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

const CONFIG: &str = r#"{
  "seed": 1,
  "model": "toy",
  "data": {"n": 30, "seed": 4},
  "pretrain": {"steps": 3, "batch_size": 2},
  "finetune": {"steps": 3, "batch_size": 2},
  "eval": {"threshold": 0.5}
}"#;

fn setup() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("run.json"), CONFIG).unwrap();
    let o = cxr(&["gen-data", "--config", "run.json", "--out", "data"], dir.path());
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    dir
}

#[test]
fn full_workflow() {
    let dir = setup();
    let d = dir.path();
    assert!(d.join("data/manifest.json").exists());
    assert!(d.join("data/images/00000.pgm").exists());

    let o = cxr(&["pretrain", "data", "--config", "run.json", "--out", "pre.ckpt"], d);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let log = fs::read_to_string(d.join("pre.loss.csv")).unwrap();
    assert_eq!(log.lines().count(), 4);
    assert!(log.starts_with("step,stage,loss_total,loss_mim,loss_mlm\n"));

    let o = cxr(&["finetune", "data", "--config", "run.json", "--out", "ft.ckpt"], d);
    assert_eq!(code(&o), 2, "finetune without a checkpoint must be refused");
    let o = cxr(
        &["finetune", "data", "--config", "run.json", "--checkpoint", "pre.ckpt", "--out", "ft.ckpt"],
        d,
    );
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(fs::read_to_string(d.join("ft.loss.csv")).unwrap().contains("loss_detect"));

    let records = fs::read_to_string(d.join("data/records.jsonl")).unwrap();
    let first: serde_json::Value = serde_json::from_str(records.lines().next().unwrap()).unwrap();
    fs::write(d.join("note.txt"), first["note"].as_str().unwrap()).unwrap();
    let o = cxr(
        &[
            "report",
            "data/images/00000.pgm",
            "note.txt",
            "--checkpoint",
            "ft.ckpt",
            "--out",
            "report.json",
            "--attn",
            "attn.csv",
        ],
        d,
    );
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(d.join("report.json")).unwrap()).unwrap();
    let ids = report["ids"].as_array().unwrap();
    let lps = report["token_log_probs"].as_array().unwrap();
    assert_eq!(ids.len(), lps.len());
    assert!(lps.iter().all(|v| v.as_f64().unwrap() <= 0.0));

    let attn = fs::read_to_string(d.join("attn.csv")).unwrap();
    let mut lines = attn.lines();
    assert_eq!(lines.next(), Some("layer,head,text_position,patch,weight"));
    let mut row_sums = std::collections::BTreeMap::<(usize, usize, usize), f64>::new();
    let mut rows = 0;
    for line in lines {
        let f: Vec<&str> = line.split(',').collect();
        let key = (f[0].parse().unwrap(), f[1].parse().unwrap(), f[2].parse().unwrap());
        *row_sums.entry(key).or_default() += f[4].parse::<f64>().unwrap();
        rows += 1;
    }
    assert!(row_sums.values().all(|s| (s - 1.0).abs() < 1e-9));
    // Toy model: 2 fusion layers, 4 heads, 16 patches.
    let text_len = row_sums.keys().map(|k| k.2).max().unwrap() + 1;
    assert_eq!(row_sums.len(), 2 * 4 * text_len);
    assert_eq!(rows, 2 * 4 * text_len * 16);

    let o = cxr(&["evaluate", "data", "--checkpoint", "ft.ckpt", "--split", "val", "--out", "eval"], d);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let metrics: serde_json::Value = serde_json::from_str(&fs::read_to_string(d.join("eval/metrics.json")).unwrap()).unwrap();
    assert_eq!(metrics["split"], "val");
    assert_eq!(metrics["pathologies"].as_array().unwrap().len(), 6);
    assert!(fs::read_to_string(d.join("eval/roc.csv")).unwrap().starts_with("pathology,threshold,fpr,tpr\n"));
    assert!(fs::read_to_string(d.join("eval/table.txt")).unwrap().starts_with("Pathology"));
    assert!(fs::read_to_string(d.join("eval/table.tex")).unwrap().contains("\\toprule"));
}

#[test]
fn oracle_evaluation_is_perfect() {
    let dir = setup();
    let o = cxr(&["evaluate", "data", "--oracle", "--split", "train", "--out", "oracle"], dir.path());
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let m: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("oracle/metrics.json")).unwrap()).unwrap();
    for p in m["pathologies"].as_array().unwrap() {
        for key in ["precision", "recall", "auc", "iou"] {
            assert_eq!(p[key], 1.0, "{} {key}", p["pathology"]);
        }
    }
}

#[test]
fn config_errors_name_the_field() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fs::write(d.join("typo.json"), r#"{"pretrain": {"batch_sise": 3}}"#).unwrap();
    let o = cxr(&["gen-data", "--config", "typo.json", "--out", "x"], d);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("pretrain"), "{}", stderr(&o));
    assert!(stderr(&o).contains("batch_sise"), "{}", stderr(&o));

    fs::write(d.join("type.json"), r#"{"data": {"n": "many"}}"#).unwrap();
    let o = cxr(&["gen-data", "--config", "type.json", "--out", "x"], d);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("data.n"), "{}", stderr(&o));

    fs::write(d.join("model.json"), r#"{"model": {"image_height": 64}}"#).unwrap();
    let o = cxr(&["gen-data", "--config", "model.json", "--out", "x"], d);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("model"), "{}", stderr(&o));

    fs::write(d.join("range.json"), r#"{"finetune": {"mim_ratio": 1.5}}"#).unwrap();
    let o = cxr(&["gen-data", "--config", "range.json", "--out", "x"], d);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("finetune.mim_ratio"), "{}", stderr(&o));

    let o = cxr(&["gen-data", "--config", "absent.json", "--out", "x"], d);
    assert_eq!(code(&o), 4);
}

#[test]
fn checkpoint_and_data_failures() {
    let dir = setup();
    let d = dir.path();
    fs::write(d.join("junk.ckpt"), b"not a checkpoint").unwrap();
    fs::write(d.join("note.txt"), "No prior TB history.").unwrap();
    let o = cxr(&["report", "data/images/00000.pgm", "note.txt", "--checkpoint", "junk.ckpt"], d);
    assert_eq!(code(&o), 3, "{}", stderr(&o));

    let o = cxr(&["pretrain", "missing", "--out", "p.ckpt"], d);
    assert_eq!(code(&o), 4, "{}", stderr(&o));

    fs::write(d.join("all-train.json"), r#"{"data": {"n": 6, "splits": [1.0, 0.0, 0.0]}}"#).unwrap();
    let o = cxr(&["gen-data", "--config", "all-train.json", "--out", "tiny"], d);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let o = cxr(&["evaluate", "tiny", "--oracle", "--out", "e"], d);
    assert_eq!(code(&o), 5, "{}", stderr(&o));
}

#[test]
fn generation_is_reproducible_and_seeded() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fs::write(d.join("run.json"), CONFIG).unwrap();
    for (out, seed, jobs) in [("a", "11", "1"), ("b", "11", "3"), ("c", "12", "1")] {
        let o = cxr(&["--jobs", jobs, "gen-data", "--config", "run.json", "--seed", seed, "--out", out], d);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
    }
    let read = |p: &str| fs::read(d.join(p)).unwrap();
    assert_eq!(read("a/records.jsonl"), read("b/records.jsonl"));
    assert_eq!(read("a/images/00003.pgm"), read("b/images/00003.pgm"));
    assert_ne!(read("a/records.jsonl"), read("c/records.jsonl"));
}

#[test]
fn zero_steps_keep_the_checkpoint() {
    let dir = setup();
    let d = dir.path();
    fs::write(d.join("idle.json"), r#"{"pretrain": {"steps": 0}, "finetune": {"steps": 0}}"#).unwrap();
    let o = cxr(&["pretrain", "data", "--config", "run.json", "--out", "a.ckpt"], d);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    for stage in ["pretrain", "finetune"] {
        let o = cxr(&[stage, "data", "--config", "idle.json", "--checkpoint", "a.ckpt", "--out", "b.ckpt"], d);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        assert_eq!(fs::read(d.join("a.ckpt")).unwrap(), fs::read(d.join("b.ckpt")).unwrap(), "{stage}");
    }
}

#[test]
fn single_record_dataset_and_mismatched_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fs::write(d.join("one.json"), r#"{"data": {"n": 1}, "pretrain": {"steps": 2, "batch_size": 1}}"#).unwrap();
    let o = cxr(&["gen-data", "--config", "one.json", "--out", "one"], d);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(fs::read_to_string(d.join("one/records.jsonl")).unwrap().lines().count(), 1);

    let o = cxr(&["pretrain", "one", "--config", "one.json", "--out", "one.ckpt"], d);
    assert_eq!(code(&o), 0, "{}", stderr(&o));

    // A checkpoint trained on one vocabulary cannot run on a dataset with another.
    fs::write(d.join("run.json"), CONFIG).unwrap();
    let o = cxr(&["gen-data", "--config", "run.json", "--out", "other"], d);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let one_vocab = fs::read(d.join("one/vocab.txt")).unwrap();
    if one_vocab != fs::read(d.join("other/vocab.txt")).unwrap() {
        let o = cxr(&["finetune", "other", "--config", "run.json", "--checkpoint", "one.ckpt", "--out", "f.ckpt"], d);
        assert_eq!(code(&o), 3, "{}", stderr(&o));
    }
}

#[test]
fn untrained_reports_halt_and_logs_repeat() {
    let dir = setup();
    let d = dir.path();
    fs::write(d.join("fifty.json"), r#"{"data": {"n": 30, "seed": 4}, "pretrain": {"steps": 50, "batch_size": 2}}"#).unwrap();
    for out in ["a.ckpt", "b.ckpt"] {
        let o = cxr(&["pretrain", "data", "--config", "fifty.json", "--out", out], d);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
    }
    assert_eq!(fs::read(d.join("a.loss.csv")).unwrap(), fs::read(d.join("b.loss.csv")).unwrap());
    assert_eq!(fs::read(d.join("a.ckpt")).unwrap(), fs::read(d.join("b.ckpt")).unwrap());

    fs::write(d.join("idle.json"), r#"{"pretrain": {"steps": 0}}"#).unwrap();
    let o = cxr(&["pretrain", "data", "--config", "idle.json", "--out", "fresh.ckpt"], d);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    fs::write(d.join("note.txt"), "No prior TB history.").unwrap();
    let o = cxr(&["report", "data/images/00001.pgm", "note.txt", "--checkpoint", "fresh.ckpt"], d);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let text = String::from_utf8(o.stdout).unwrap();
    let report: serde_json::Value = serde_json::from_str(&text).unwrap();
    let ids: Vec<u64> = report["ids"].as_array().unwrap().iter().map(|v| v.as_u64().unwrap()).collect();
    // Toy decoder: at most 48 generated tokens, ending in EOS (id 2) unless the limit was hit.
    assert!(!ids.is_empty() && ids.len() <= 48);
    assert!(ids.len() == 48 || *ids.last().unwrap() == 2);
    assert_eq!(report["tokens"].as_array().unwrap().len(), ids.len());
    let again: serde_json::Value = serde_json::from_str(&serde_json::to_string(&report).unwrap()).unwrap();
    assert_eq!(again, report);
    for key in ["text", "ids", "tokens", "token_log_probs", "log_prob"] {
        assert!(report.get(key).is_some(), "{key}");
    }
}
