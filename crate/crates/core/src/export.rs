//! On-disk datasets, mask images and token dumps.

use std::fmt::Write as _;
use std::path::Path;

use crate::config::Config;
use crate::error::{Error, Result};
use crate::model::ChunkResult;
use crate::tensor_file::TensorFile;
use crate::video::{split, DataConfig, VideoRecord};

pub const DATASET_MANIFEST: &str = "manifest.txt";
const DATASET_VERSION: u32 = 1;

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub train: Vec<VideoRecord>,
    pub val: Vec<VideoRecord>,
}

impl Dataset {
    /// Generates and splits the videos described by `config`.
    pub fn generate(config: &DataConfig) -> Result<Self> {
        let videos: Vec<VideoRecord> = config
            .generate_all()?
            .iter()
            .map(VideoRecord::from)
            .collect();
        let indexed: Vec<usize> = (0..videos.len()).collect();
        let (train, val) = split(&indexed, config.holdout_fraction, config.seed)?;
        Ok(Self {
            train: train.iter().map(|&i| videos[i].clone()).collect(),
            val: val.iter().map(|&i| videos[i].clone()).collect(),
        })
    }

    /// Writes `config.cfg`, the manifest, and per video a single-precision
    /// pixel file plus an i32 label file.
    pub fn save(&self, dir: &Path, config: &Config) -> Result<()> {
        create_dir(dir)?;
        config.save(&dir.join("config.cfg"))?;
        let mut manifest = format!("version {DATASET_VERSION}\n");
        let all = self
            .train
            .iter()
            .map(|v| ("train", v))
            .chain(self.val.iter().map(|v| ("val", v)));
        for (i, (split, v)) in all.enumerate() {
            let pixels = format!("video_{i:04}.ttkt");
            let labels = format!("labels_{i:04}.ttkt");
            TensorFile::f32(&v.pixels).write(&dir.join(&pixels))?;
            let shape = &v.pixels.shape()[..3];
            TensorFile::i32(shape, v.labels.iter().map(|&l| l as i32).collect())?
                .write(&dir.join(&labels))?;
            let _ = writeln!(
                manifest,
                "video {split} {} {pixels} {labels}",
                v.scene_class
            );
        }
        write_text(&dir.join(DATASET_MANIFEST), &manifest)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(DATASET_MANIFEST);
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let bad = |msg: String| Error::format(&path, msg);
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        match lines.next().map(str::trim) {
            Some(l) if l == format!("version {DATASET_VERSION}") => {}
            other => return Err(bad(format!("unsupported header {other:?}"))),
        }
        let mut out = Dataset {
            train: Vec::new(),
            val: Vec::new(),
        };
        for line in lines {
            let fields: Vec<&str> = line.split_whitespace().collect();
            let [kind, split, class, pixels, labels] = fields[..] else {
                return Err(bad(format!("malformed entry {line:?}")));
            };
            if kind != "video" {
                return Err(bad(format!("unknown entry {kind:?}")));
            }
            let scene_class = class
                .parse()
                .map_err(|_| bad(format!("bad class {class:?}")))?;
            let pixels = TensorFile::read(&dir.join(pixels))?.to_tensor()?;
            let label_file = TensorFile::read(&dir.join(labels))?;
            if label_file.shape[..] != pixels.shape()[..pixels.rank().min(3)] {
                return Err(bad(format!(
                    "label extents {:?} do not match {labels}",
                    label_file.shape
                )));
            }
            let labels = label_file
                .to_i32()?
                .iter()
                .map(|&l| u32::try_from(l).map_err(|_| bad(format!("negative label in {labels}"))))
                .collect::<Result<Vec<_>>>()?;
            let record = VideoRecord {
                pixels,
                labels,
                scene_class,
            };
            match split {
                "train" => out.train.push(record),
                "val" => out.val.push(record),
                _ => return Err(bad(format!("unknown split {split:?}"))),
            }
        }
        Ok(out)
    }
}

/// Binary greymap with the given row-major bytes.
pub fn pgm(width: usize, height: usize, pixels: &[u8]) -> Vec<u8> {
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(pixels);
    out
}

/// Writes one PGM per frame (pixel = winning query + 1) and `active.txt`
/// listing the active queries of each chunk.
pub fn write_masks(dir: &Path, chunks: &[ChunkResult]) -> Result<()> {
    create_dir(dir)?;
    let mut manifest = String::new();
    for (c, chunk) in chunks.iter().enumerate() {
        let m = &chunk.masks;
        let cell = m.height * m.width;
        for t in 0..m.frames {
            let bytes = (0..cell)
                .map(|p| {
                    let q = m.hard.winner(t * cell + p) + 1;
                    u8::try_from(q)
                        .map_err(|_| Error::invalid(format!("query {q} does not fit a byte")))
                })
                .collect::<Result<Vec<u8>>>()?;
            let path = dir.join(format!("chunk{c:03}_frame{t:03}.pgm"));
            std::fs::write(&path, pgm(m.width, m.height, &bytes))
                .map_err(|e| Error::io(&path, e))?;
        }
        let active: Vec<String> = m
            .hard
            .active_queries()
            .iter()
            .map(usize::to_string)
            .collect();
        let _ = writeln!(manifest, "chunk={c} active={}", active.join(","));
    }
    write_text(&dir.join("active.txt"), &manifest)
}

/// Writes `chunk<c>.ttkt` token tensors and `origin.txt` with one
/// `chunk query n` line per trajectory.
pub fn write_tokens(dir: &Path, chunks: &[ChunkResult]) -> Result<()> {
    create_dir(dir)?;
    let mut origin = String::new();
    for (c, chunk) in chunks.iter().enumerate() {
        let set = &chunk.tokens;
        TensorFile::f64(&set.tokens).write(&dir.join(format!("chunk{c:03}.ttkt")))?;
        for (q, empty) in set.queries.iter().zip(&set.empty) {
            let _ = write!(origin, "chunk={c} query={q} n={}", set.n);
            if *empty {
                origin.push_str(" empty=true");
            }
            origin.push('\n');
        }
    }
    write_text(&dir.join("origin.txt"), &origin)
}
