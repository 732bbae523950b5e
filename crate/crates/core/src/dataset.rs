//! On-disk synthetic datasets: PGM images, `records.jsonl`, `manifest.json`
//! and `vocab.txt`.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::synth::{self, AnnotationRecord, Canvas};
use crate::text::{build_vocab, Vocabulary};
use crate::vision::ImageGrid;

pub const GENERATOR_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl std::str::FromStr for Split {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(format!("unknown split `{other}` (expected train, val or test)")),
        }
    }
}

/// Dataset generation settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub n: usize,
    pub seed: u64,
    pub image_height: usize,
    pub image_width: usize,
    pub patch_size: usize,
    pub noise: f64,
    /// Train, validation and test fractions.
    pub splits: [f64; 3],
    /// Fraction of images carrying each pathology.
    pub prevalence: f64,
    /// Upper bound on the vocabulary written alongside the data.
    pub max_vocab: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            n: 200,
            seed: 0,
            image_height: 64,
            image_width: 64,
            patch_size: 16,
            noise: 0.02,
            splits: [0.8, 0.1, 0.1],
            prevalence: 0.25,
            max_vocab: 256,
        }
    }
}

impl DataConfig {
    pub fn validate_at(&self, path: &str) -> Result<()> {
        let field = |f: &str| if path.is_empty() { f.to_string() } else { format!("{path}.{f}") };
        if self.n == 0 {
            return Err(Error::config(field("n"), "must be at least 1"));
        }
        if self.patch_size == 0 || self.image_height % self.patch_size != 0 || self.image_height == 0 {
            return Err(Error::config(field("image_height"), "must be a positive multiple of patch_size"));
        }
        if self.image_width % self.patch_size != 0 || self.image_width == 0 {
            return Err(Error::config(field("image_width"), "must be a positive multiple of patch_size"));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return Err(Error::config(field("noise"), "must be finite and non-negative"));
        }
        if self.splits.iter().any(|r| !(*r >= 0.0)) || (self.splits.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::config(field("splits"), "fractions must be non-negative and sum to 1"));
        }
        if !(0.0..=1.0).contains(&self.prevalence) {
            return Err(Error::config(field("prevalence"), "must lie in [0, 1]"));
        }
        if self.max_vocab < crate::text::RESERVED_COUNT {
            return Err(Error::config(field("max_vocab"), "must hold the reserved tokens"));
        }
        Ok(())
    }

    pub fn canvas(&self) -> Canvas {
        Canvas {
            height: self.image_height,
            width: self.image_width,
            patch_size: self.patch_size,
            noise: self.noise,
        }
    }

    /// Record counts per split: train and validation are rounded, test takes the rest.
    pub fn split_sizes(&self) -> [usize; 3] {
        let train = ((self.splits[0] * self.n as f64).round() as usize).min(self.n);
        let val = ((self.splits[1] * self.n as f64).round() as usize).min(self.n - train);
        [train, val, self.n - train - val]
    }
}

/// One line of `records.jsonl`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Record {
    #[serde(flatten)]
    pub annotation: AnnotationRecord,
    pub image: String,
    pub split: Split,
    pub note: String,
    pub report: String,
}

impl Record {
    pub fn id(&self) -> &str {
        &self.annotation.id
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub image: String,
    pub split: Split,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub generator_version: u32,
    pub seed: u64,
    pub n: usize,
    pub image_height: usize,
    pub image_width: usize,
    pub patch_size: usize,
    pub split_sizes: [usize; 3],
    pub records: Vec<ManifestEntry>,
}

/// Writes an 8-bit binary PGM with pixel `round(255·value)`.
pub fn write_pgm(path: &Path, img: &ImageGrid) -> Result<()> {
    let mut bytes = format!("P5\n{} {}\n255\n", img.width(), img.height()).into_bytes();
    bytes.extend(img.pixels().iter().map(|v| (v * 255.0).round() as u8));
    fs::write(path, bytes).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

/// Reads an 8-bit binary PGM into `[0, 1]` pixels.
pub fn read_pgm(path: &Path) -> Result<ImageGrid> {
    let bytes = fs::read(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    parse_pgm(&bytes).map_err(|m| Error::Dataset(format!("{}: {m}", path.display())))
}

fn parse_pgm(bytes: &[u8]) -> std::result::Result<ImageGrid, String> {
    let mut fields = Vec::new();
    let mut i = 0;
    while fields.len() < 4 {
        while i < bytes.len() && bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        if i < bytes.len() && bytes[i] == b'#' {
            while i < bytes.len() && bytes[i] != b'\n' {
                i += 1;
            }
            continue;
        }
        let start = i;
        while i < bytes.len() && !bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        if start == i {
            return Err("truncated header".into());
        }
        fields.push(std::str::from_utf8(&bytes[start..i]).map_err(|_| "non-ASCII header")?.to_string());
    }
    if fields[0] != "P5" {
        return Err(format!("not a binary PGM (magic {:?})", fields[0]));
    }
    let num = |s: &str| s.parse::<usize>().map_err(|_| format!("bad header field {s:?}"));
    let (w, h, max) = (num(&fields[1])?, num(&fields[2])?, num(&fields[3])?);
    if max == 0 || max > 255 {
        return Err(format!("unsupported maxval {max}"));
    }
    let data = bytes.get(i + 1..).ok_or("missing pixel data")?;
    if data.len() != w * h {
        return Err(format!("expected {} pixel bytes, found {}", w * h, data.len()));
    }
    let pixels = data.iter().map(|&b| b as f64 / max as f64).collect();
    ImageGrid::new(h, w, pixels).map_err(|e| e.to_string())
}

/// Generates `cfg.n` records into `out` using at most `jobs` worker threads.
pub fn build_dataset(cfg: &DataConfig, out: &Path, jobs: usize) -> Result<DatasetManifest> {
    cfg.validate_at("data")?;
    let images = out.join("images");
    fs::create_dir_all(&images).map_err(|e| Error::io(format!("creating {}", images.display()), e))?;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let presence = synth::stratified_presence(cfg.n, cfg.prevalence, &mut rng);
    let sizes = cfg.split_sizes();
    let split_of = |i: usize| {
        if i < sizes[0] {
            Split::Train
        } else if i < sizes[0] + sizes[1] {
            Split::Val
        } else {
            Split::Test
        }
    };
    let canvas = cfg.canvas();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| Error::Dataset(format!("thread pool: {e}")))?;
    let records: Vec<Record> = pool.install(|| {
        (0..cfg.n)
            .into_par_iter()
            .map(|i| {
                let id = format!("{i:05}");
                let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
                rng.set_stream(i as u64 + 1);
                let (img, annotation, note, report) = synth::sample_record(&id, &presence[i], canvas, &mut rng)?;
                let image = format!("images/{id}.pgm");
                write_pgm(&out.join(&image), &img)?;
                Ok(Record {
                    annotation,
                    image,
                    split: split_of(i),
                    note,
                    report,
                })
            })
            .collect::<Result<Vec<_>>>()
    })?;

    let path = out.join("records.jsonl");
    let file = fs::File::create(&path).map_err(|e| Error::io(format!("creating {}", path.display()), e))?;
    let mut w = BufWriter::new(file);
    for r in &records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n").map_err(|e| Error::io(format!("writing {}", path.display()), e))?;
    }
    w.flush().map_err(|e| Error::io(format!("writing {}", path.display()), e))?;

    let mut corpus: Vec<String> = records.iter().flat_map(|r| [r.note.clone(), r.report.clone()]).collect();
    corpus.extend(synth::vqa_lexicon_text());
    build_vocab(&corpus, cfg.max_vocab)?.save(&out.join("vocab.txt"))?;

    let manifest = DatasetManifest {
        generator_version: GENERATOR_VERSION,
        seed: cfg.seed,
        n: cfg.n,
        image_height: cfg.image_height,
        image_width: cfg.image_width,
        patch_size: cfg.patch_size,
        split_sizes: sizes,
        records: records
            .iter()
            .map(|r| ManifestEntry {
                id: r.id().to_string(),
                image: r.image.clone(),
                split: r.split,
            })
            .collect(),
    };
    let path = out.join("manifest.json");
    let body = serde_json::to_string_pretty(&manifest)?;
    fs::write(&path, body + "\n").map_err(|e| Error::io(format!("writing {}", path.display()), e))?;
    Ok(manifest)
}

/// A dataset directory loaded into memory (images are read on demand).
#[derive(Clone, Debug)]
pub struct Dataset {
    pub root: PathBuf,
    pub manifest: DatasetManifest,
    pub records: Vec<Record>,
    pub vocab: Vocabulary,
}

impl Dataset {
    pub fn load(root: &Path) -> Result<Self> {
        let path = root.join("manifest.json");
        let body = fs::read_to_string(&path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        let manifest: DatasetManifest = serde_json::from_str(&body)?;
        let path = root.join("records.jsonl");
        let file = fs::File::open(&path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        let mut records = Vec::new();
        for (n, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
            if line.trim().is_empty() {
                continue;
            }
            let r: Record = serde_json::from_str(&line)
                .map_err(|e| Error::Dataset(format!("{} line {}: {e}", path.display(), n + 1)))?;
            let grid = (manifest.image_height / manifest.patch_size) * (manifest.image_width / manifest.patch_size);
            r.annotation.validate(grid)?;
            records.push(r);
        }
        if records.len() != manifest.records.len()
            || records.iter().zip(&manifest.records).any(|(r, m)| r.id() != m.id || r.image != m.image)
        {
            return Err(Error::Dataset(format!(
                "{} disagrees with manifest.json",
                path.display()
            )));
        }
        let vocab = Vocabulary::load(&root.join("vocab.txt"))?;
        Ok(Dataset {
            root: root.to_path_buf(),
            manifest,
            records,
            vocab,
        })
    }

    pub fn image(&self, record: &Record) -> Result<ImageGrid> {
        read_pgm(&self.root.join(&record.image))
    }

    pub fn split(&self, split: Split) -> Vec<&Record> {
        self.records.iter().filter(|r| r.split == split).collect()
    }

    pub fn grid(&self) -> (usize, usize) {
        let m = &self.manifest;
        (m.image_height / m.patch_size, m.image_width / m.patch_size)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pgm_round_trip_quantizes() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.pgm");
        let img = ImageGrid::new(2, 3, vec![0.0, 0.5, 1.0, 0.25, 0.75, 0.1]).unwrap();
        write_pgm(&path, &img).unwrap();
        let back = read_pgm(&path).unwrap();
        assert_eq!((back.height(), back.width()), (2, 3));
        assert!(back.pixels().iter().zip(img.pixels()).all(|(a, b)| (a - b).abs() <= 0.5 / 255.0 + 1e-12));
        assert!(read_pgm(&dir.path().join("missing.pgm")).is_err());
    }

    #[test]
    fn split_arithmetic() {
        let mut cfg = DataConfig::default();
        assert_eq!(cfg.split_sizes(), [160, 20, 20]);
        cfg.n = 1;
        assert_eq!(cfg.split_sizes(), [1, 0, 0]);
    }

    #[test]
    fn bad_ratios_rejected() {
        let cfg = DataConfig {
            splits: [0.8, 0.1, 0.2],
            ..DataConfig::default()
        };
        assert!(matches!(cfg.validate_at("data"), Err(Error::Config { path, .. }) if path == "data.splits"));
    }

    #[test]
    fn small_dataset_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = DataConfig {
            n: 12,
            ..DataConfig::default()
        };
        let manifest = build_dataset(&cfg, dir.path(), 2).unwrap();
        assert_eq!(manifest.records.len(), 12);
        let ds = Dataset::load(dir.path()).unwrap();
        assert_eq!(ds.records.len(), 12);
        let img = ds.image(&ds.records[0]).unwrap();
        assert_eq!(img.height(), 64);
        let ids = ds.vocab.encode(&ds.records[0].report);
        assert!(!ids.contains(&crate::text::UNK));
    }
}
