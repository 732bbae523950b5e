//! `cxr-vlm`: generate synthetic data, train, report and evaluate.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use cxr_vlm::autodiff::Tape;
use cxr_vlm::checkpoint::Checkpoint;
use cxr_vlm::dataset::{build_dataset, read_pgm, DataConfig, Dataset, Split};
use cxr_vlm::decoder::{generate_report, DecodingMode};
use cxr_vlm::fusion::fuse;
use cxr_vlm::metrics::{evaluate, latex_table, roc_csv, text_table, Predictor, TableRow, DEFAULT_THRESHOLD};
use cxr_vlm::text::{encode_text, tokenize};
use cxr_vlm::train::{loss_csv, train, Stage, TrainConfig, TrainingSet};
use cxr_vlm::vision::encode_image;
use cxr_vlm::{Error, ModelConfig};

const EXIT_CONFIG: u8 = 2;
const EXIT_CHECKPOINT: u8 = 3;
const EXIT_IO: u8 = 4;
const EXIT_EMPTY: u8 = 5;

#[derive(Parser)]
#[command(name = "cxr-vlm", version, about = "Chest X-ray vision-language model on synthetic data")]
struct Cli {
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset directory.
    GenData {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Masked image and masked language pre-training.
    Pretrain(TrainArgs),
    /// Captioning, VQA and detection fine-tuning.
    Finetune(TrainArgs),
    /// Generate a report for one image and clinical note.
    Report {
        image: PathBuf,
        /// Text file holding the clinical note.
        note: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Report JSON destination (stdout when omitted).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Also write the fusion attention maps as CSV.
        #[arg(long)]
        attn: Option<PathBuf>,
        /// Beam width; greedy decoding when omitted.
        #[arg(long)]
        beam: Option<usize>,
    },
    /// Detection metrics on one split.
    Evaluate {
        data: PathBuf,
        /// Required unless --oracle.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        split: Option<Split>,
        #[arg(long)]
        threshold: Option<f64>,
        /// Output directory for metrics.json, roc.csv and table files.
        #[arg(long)]
        out: PathBuf,
        /// Score with the ground-truth masks instead of a model.
        #[arg(long)]
        oracle: bool,
    },
}

#[derive(Args)]
struct TrainArgs {
    /// Dataset directory written by gen-data.
    data: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Checkpoint to continue from.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Start from fresh parameters (fine-tuning without pre-training).
    #[arg(long)]
    from_scratch: bool,
    /// Checkpoint to write; the loss log goes next to it as `<stem>.loss.csv`.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct EvalConfig {
    threshold: Option<f64>,
    split: Option<Split>,
}

/// The run configuration file. Every section is optional.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct RunConfig {
    seed: u64,
    /// A preset name or a full model configuration.
    model: serde_json::Value,
    data: DataConfig,
    pretrain: TrainConfig,
    finetune: TrainConfig,
    eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            model: serde_json::Value::String("toy".into()),
            data: DataConfig::default(),
            pretrain: TrainConfig::default(),
            finetune: TrainConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn new(code: u8, message: impl Into<String>) -> Self {
        Failure {
            code,
            message: message.into(),
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::Config { .. } => EXIT_CONFIG,
            Error::Checkpoint(_) => EXIT_CHECKPOINT,
            Error::Io { .. } | Error::Json(_) | Error::Dataset(_) => EXIT_IO,
            _ => 1,
        };
        Failure::new(code, e.to_string())
    }
}

type CliResult<T> = std::result::Result<T, Failure>;

fn load_config(path: Option<&Path>) -> CliResult<(RunConfig, ModelConfig)> {
    let run = match path {
        None => RunConfig::default(),
        Some(p) => {
            let text = fs::read_to_string(p)
                .map_err(|e| Failure::new(EXIT_IO, format!("reading {}: {e}", p.display())))?;
            let de = &mut serde_json::Deserializer::from_str(&text);
            serde_path_to_error::deserialize(de).map_err(|e| {
                let path = e.path().to_string();
                Failure::new(EXIT_CONFIG, format!("{}: `{path}`: {}", p.display(), e.into_inner()))
            })?
        }
    };
    let model = match &run.model {
        serde_json::Value::String(name) => ModelConfig::preset(name).ok_or_else(|| {
            Failure::new(
                EXIT_CONFIG,
                format!("`model`: unknown preset `{name}` (expected toy or paper-shape)"),
            )
        })?,
        other => serde_path_to_error::deserialize(other.clone()).map_err(|e| {
            let path = match e.path().to_string() {
                p if p == "." => "model".to_string(),
                p => format!("model.{p}"),
            };
            Failure::new(EXIT_CONFIG, format!("`{path}`: {}", e.into_inner()))
        })?,
    };
    model.validate_at("model")?;
    run.data.validate_at("data")?;
    run.pretrain.validate_at("pretrain")?;
    run.finetune.validate_at("finetune")?;
    if let Some(t) = run.eval.threshold {
        check_threshold(t, "eval.threshold")?;
    }
    Ok((run, model))
}

fn check_threshold(t: f64, field: &str) -> CliResult<()> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Failure::new(EXIT_CONFIG, format!("`{field}`: {t} is outside [0, 1]")));
    }
    Ok(())
}

fn load_dataset(dir: &Path) -> CliResult<Dataset> {
    Ok(Dataset::load(dir)?)
}

fn check_geometry(ds: &Dataset, model: &ModelConfig, code: u8) -> CliResult<()> {
    let m = &ds.manifest;
    if (m.image_height, m.image_width, m.patch_size) != (model.image_height, model.image_width, model.patch_size) {
        return Err(Failure::new(
            code,
            format!(
                "dataset images are {}x{} with {}-pixel patches but the model expects {}x{} with {}-pixel patches",
                m.image_height, m.image_width, m.patch_size, model.image_height, model.image_width, model.patch_size
            ),
        ));
    }
    Ok(())
}

fn write(path: &Path, body: &[u8]) -> CliResult<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Failure::new(EXIT_IO, format!("creating {}: {e}", dir.display())))?;
    }
    fs::write(path, body).map_err(|e| Failure::new(EXIT_IO, format!("writing {}: {e}", path.display())))
}

fn loss_log_path(out: &Path) -> PathBuf {
    let stem = out.file_stem().map_or("checkpoint".into(), |s| s.to_string_lossy().into_owned());
    out.with_file_name(format!("{stem}.loss.csv"))
}

fn gen_data(config: Option<&Path>, seed: Option<u64>, out: &Path, jobs: usize) -> CliResult<()> {
    let (run, _) = load_config(config)?;
    let mut data = run.data;
    if let Some(s) = seed {
        data.seed = s;
    }
    let m = build_dataset(&data, out, jobs)?;
    println!(
        "wrote {} records to {} (train {}, val {}, test {})",
        m.n,
        out.display(),
        m.split_sizes[0],
        m.split_sizes[1],
        m.split_sizes[2]
    );
    Ok(())
}

fn run_training(stage: Stage, a: &TrainArgs) -> CliResult<()> {
    let (run, model) = load_config(a.config.as_deref())?;
    let seed = a.seed.unwrap_or(run.seed);
    let tcfg = match stage {
        Stage::Pretrain => run.pretrain,
        Stage::Finetune => run.finetune,
    };
    let ds = load_dataset(&a.data)?;
    let mut ckpt = match (&a.checkpoint, a.from_scratch) {
        (Some(_), true) => {
            return Err(Failure::new(EXIT_CONFIG, "--checkpoint and --from-scratch are mutually exclusive"))
        }
        (Some(path), false) => {
            let c = Checkpoint::load(path)?;
            if c.vocab != ds.vocab {
                return Err(Failure::new(
                    EXIT_CHECKPOINT,
                    format!("{}: vocabulary differs from the dataset's", path.display()),
                ));
            }
            if a.config.is_some() && c.config != model {
                return Err(Failure::new(
                    EXIT_CHECKPOINT,
                    format!("{}: model configuration differs from the config file", path.display()),
                ));
            }
            c
        }
        (None, from_scratch) => {
            if stage == Stage::Finetune && !from_scratch {
                return Err(Failure::new(
                    EXIT_CONFIG,
                    "finetune needs --checkpoint from pre-training, or --from-scratch",
                ));
            }
            Checkpoint::init(model, ds.vocab.clone(), seed)?
        }
    };
    let code = if a.checkpoint.is_some() { EXIT_CHECKPOINT } else { EXIT_CONFIG };
    check_geometry(&ds, &ckpt.config, code)?;
    let set = match TrainingSet::from_dataset(&ds, Split::Train, &ckpt.config) {
        Err(Error::Dataset(m)) if ds.split(Split::Train).is_empty() => return Err(Failure::new(EXIT_EMPTY, m)),
        other => other?,
    };
    let rows = train(&mut ckpt, stage, &tcfg, &set, seed)?;
    ckpt.save(&a.out)?;
    let log = loss_log_path(&a.out);
    write(&log, loss_csv(&rows, stage).as_bytes())?;
    match rows.last() {
        Some(r) => println!(
            "{stage}: {} steps, final loss {:.4}; wrote {} and {}",
            rows.len(),
            r.total,
            a.out.display(),
            log.display()
        ),
        None => println!("{stage}: 0 steps; wrote {}", a.out.display()),
    }
    Ok(())
}

#[derive(Serialize)]
struct ReportJson<'a> {
    text: &'a str,
    ids: &'a [u32],
    tokens: Vec<&'a str>,
    token_log_probs: &'a [f64],
    log_prob: f64,
}

#[allow(clippy::too_many_arguments)]
fn report(
    image: &Path,
    note: &Path,
    checkpoint: &Path,
    out: Option<&Path>,
    attn: Option<&Path>,
    beam: Option<usize>,
) -> CliResult<()> {
    let ckpt = Checkpoint::load(checkpoint)?;
    let cfg = &ckpt.config;
    let img = read_pgm(image)?;
    let note = fs::read_to_string(note).map_err(|e| Failure::new(EXIT_IO, format!("reading {}: {e}", note.display())))?;
    let mode = match beam {
        None => DecodingMode::Greedy,
        Some(0) => return Err(Failure::new(EXIT_CONFIG, "--beam must be at least 1")),
        Some(k) => DecodingMode::Beam(k),
    };
    let tape = Tape::no_grad();
    let seq = tokenize(note.trim(), &ckpt.vocab, cfg.max_text_len).trimmed();
    let vision = encode_image(&tape, &ckpt.params, &img, cfg)?;
    let text = encode_text(&tape, &ckpt.params, &seq, cfg)?;
    let fused = fuse(&tape, &ckpt.params, &text, seq.mask(), &vision, cfg, attn.is_some())?;
    let r = generate_report(&ckpt.params, &fused, cfg, &ckpt.vocab, mode)?;
    let json = ReportJson {
        text: &r.text,
        ids: &r.ids,
        tokens: r.ids.iter().map(|&i| ckpt.vocab.token(i).unwrap_or("[UNK]")).collect(),
        token_log_probs: &r.token_log_probs,
        log_prob: r.log_prob(),
    };
    let body = serde_json::to_string_pretty(&json).map_err(|e| Failure::new(1, e.to_string()))? + "\n";
    match out {
        Some(p) => {
            write(p, body.as_bytes())?;
            println!("{}", r.text);
        }
        None => print!("{body}"),
    }
    if let Some(p) = attn {
        let mut csv = String::from("layer,head,text_position,patch,weight\n");
        for (layer, heads) in fused.attention.iter().enumerate() {
            for (h, map) in heads.iter().enumerate() {
                for t in 0..map.rows() {
                    for (patch, w) in map.row(t).iter().enumerate() {
                        let _ = writeln!(csv, "{layer},{h},{t},{patch},{w}");
                    }
                }
            }
        }
        write(p, csv.as_bytes())?;
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn evaluate_cmd(
    data: &Path,
    checkpoint: Option<&Path>,
    config: Option<&Path>,
    split: Option<Split>,
    threshold: Option<f64>,
    out: &Path,
    oracle: bool,
) -> CliResult<()> {
    let (run, model) = load_config(config)?;
    let split = split.or(run.eval.split).unwrap_or(Split::Test);
    let threshold = threshold.or(run.eval.threshold).unwrap_or(DEFAULT_THRESHOLD);
    check_threshold(threshold, "--threshold")?;
    let ds = load_dataset(data)?;
    let ckpt = match (checkpoint, oracle) {
        (Some(p), _) => Some(Checkpoint::load(p)?),
        (None, true) => None,
        (None, false) => return Err(Failure::new(EXIT_CONFIG, "evaluate needs --checkpoint or --oracle")),
    };
    let mut cfg = ckpt.as_ref().map_or(model, |c| c.config.clone());
    if oracle && ckpt.is_none() {
        let m = &ds.manifest;
        (cfg.image_height, cfg.image_width, cfg.patch_size) = (m.image_height, m.image_width, m.patch_size);
    }
    check_geometry(&ds, &cfg, if ckpt.is_some() { EXIT_CHECKPOINT } else { EXIT_CONFIG })?;
    let records = ds.split(split);
    let split_name = format!("{split:?}").to_lowercase();
    if records.is_empty() {
        return Err(Failure::new(EXIT_EMPTY, format!("split `{split_name}` has no images")));
    }
    let images = records
        .iter()
        .map(|r| Ok((ds.image(r)?, r.annotation.clone())))
        .collect::<cxr_vlm::Result<Vec<_>>>()?;
    let predictor = match (&ckpt, oracle) {
        (_, true) => Predictor::Oracle,
        (Some(c), false) => Predictor::Model(&c.params),
        (None, false) => unreachable!(),
    };
    let ev = evaluate(&predictor, &images, &cfg, threshold, &split_name)?;
    let rows: Vec<TableRow> = ev.report.pathologies.iter().map(TableRow::from_metrics).collect();
    let metrics = serde_json::to_string_pretty(&ev.report).map_err(|e| Failure::new(1, e.to_string()))? + "\n";
    write(&out.join("metrics.json"), metrics.as_bytes())?;
    write(&out.join("roc.csv"), roc_csv(&ev.curves).as_bytes())?;
    let table = text_table(&rows);
    write(&out.join("table.txt"), table.as_bytes())?;
    write(&out.join("table.tex"), latex_table(&rows).as_bytes())?;
    print!("{table}");
    Ok(())
}

fn run(cli: Cli) -> CliResult<()> {
    let jobs = match cli.jobs {
        Some(0) => return Err(Failure::new(EXIT_CONFIG, "--jobs must be at least 1")),
        Some(j) => j,
        None => std::thread::available_parallelism().map_or(1, |n| n.get()),
    };
    // Results do not depend on the thread count; only speed does.
    let _ = rayon::ThreadPoolBuilder::new().num_threads(jobs).build_global();
    match cli.command {
        Command::GenData { config, seed, out } => gen_data(config.as_deref(), seed, &out, jobs),
        Command::Pretrain(a) => run_training(Stage::Pretrain, &a),
        Command::Finetune(a) => run_training(Stage::Finetune, &a),
        Command::Report {
            image,
            note,
            checkpoint,
            out,
            attn,
            beam,
        } => report(&image, &note, &checkpoint, out.as_deref(), attn.as_deref(), beam),
        Command::Evaluate {
            data,
            checkpoint,
            config,
            split,
            threshold,
            out,
            oracle,
        } => evaluate_cmd(&data, checkpoint.as_deref(), config.as_deref(), split, threshold, &out, oracle),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
