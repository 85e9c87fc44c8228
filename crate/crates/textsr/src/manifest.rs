//! Paired-sample dataset plumbing: the on-disk manifest format (one JSON
//! record per line pointing at LR/HR PNGs) and helpers to stack loaded
//! samples into training batches.
//!
//! Manifest image paths are resolved relative to the manifest file itself,
//! so a corpus directory can be moved or copied wholesale.

use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor};

use crate::error::{Error, Result};
use crate::imageops::{load_png, save_png};
use crate::types::{ImageRole, ImageTensor};

/// Degradation bucket, mirroring how benchmark sets split their test data.
#[derive(
    Debug, Clone, Copy, Default, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize,
)]
#[serde(rename_all = "lowercase")]
pub enum Difficulty {
    Easy,
    Medium,
    Hard,
    #[default]
    Unknown,
}

impl std::fmt::Display for Difficulty {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Difficulty::Easy => "easy",
            Difficulty::Medium => "medium",
            Difficulty::Hard => "hard",
            Difficulty::Unknown => "unknown",
        };
        write!(f, "{s}")
    }
}

impl std::str::FromStr for Difficulty {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "easy" => Ok(Difficulty::Easy),
            "medium" => Ok(Difficulty::Medium),
            "hard" => Ok(Difficulty::Hard),
            "unknown" => Ok(Difficulty::Unknown),
            other => Err(Error::msg(format!("unknown difficulty `{other}`"))),
        }
    }
}

/// One LR/HR pair with its transcription. Each image is a batch of one; the
/// HR image is exactly twice the LR image in both spatial dims.
#[derive(Debug, Clone)]
pub struct PairedSample {
    pub lr: ImageTensor,
    pub hr: ImageTensor,
    pub label: String,
    pub difficulty: Difficulty,
}

impl PairedSample {
    pub fn new(
        lr: ImageTensor,
        hr: ImageTensor,
        label: String,
        difficulty: Difficulty,
    ) -> Result<Self> {
        let (lb, lc, lh, lw) = lr.dims();
        let (hb, hc, hh, hw) = hr.dims();
        if lb != 1 || hb != 1 {
            return Err(Error::msg(format!(
                "paired sample images must be batches of one, got lr batch {lb}, hr batch {hb}"
            )));
        }
        if hc != lc || hh != 2 * lh || hw != 2 * lw {
            return Err(Error::msg(format!(
                "scale mismatch: hr is {hc}x{hh}x{hw} but lr {lc}x{lh}x{lw} requires {lc}x{}x{}",
                2 * lh,
                2 * lw
            )));
        }
        Ok(Self {
            lr,
            hr,
            label,
            difficulty,
        })
    }
}

#[derive(serde::Serialize, serde::Deserialize)]
struct Record {
    lr_path: String,
    hr_path: String,
    label: String,
    #[serde(default)]
    difficulty: Difficulty,
}

/// Reads a JSONL manifest and loads every referenced image pair.
///
/// Any bad line — malformed JSON, unreadable image, scale mismatch — fails
/// with the zero-based record index. An empty manifest is allowed but prints
/// a warning to stderr.
pub fn load_manifest(path: &Path, dtype: DType, device: &Device) -> Result<Vec<PairedSample>> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::msg(format!("manifest {}: {e}", path.display())))?;
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    let resolve = |p: &str| -> PathBuf {
        let pb = Path::new(p);
        if pb.is_absolute() {
            pb.to_path_buf()
        } else {
            base.join(pb)
        }
    };

    let mut out = Vec::new();
    for (index, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec: Record = serde_json::from_str(line).map_err(|e| Error::ManifestRecord {
            index,
            reason: format!("malformed record: {e}"),
        })?;
        let lr = load_png(&resolve(&rec.lr_path), ImageRole::Lr, dtype, device).map_err(|e| {
            Error::ManifestRecord {
                index,
                reason: format!("lr image {}: {e}", rec.lr_path),
            }
        })?;
        let hr = load_png(&resolve(&rec.hr_path), ImageRole::Hr, dtype, device).map_err(|e| {
            Error::ManifestRecord {
                index,
                reason: format!("hr image {}: {e}", rec.hr_path),
            }
        })?;
        let sample =
            PairedSample::new(lr, hr, rec.label, rec.difficulty).map_err(|e| {
                Error::ManifestRecord {
                    index,
                    reason: e.to_string(),
                }
            })?;
        out.push(sample);
    }
    if out.is_empty() {
        eprintln!("warning: manifest {} contains no records", path.display());
    }
    Ok(out)
}

/// Writes samples as PNGs under `dir/lr` and `dir/hr` plus a manifest, and
/// returns the manifest path. Existing files are overwritten.
pub fn write_corpus(samples: &[PairedSample], dir: &Path) -> Result<PathBuf> {
    std::fs::create_dir_all(dir.join("lr"))?;
    std::fs::create_dir_all(dir.join("hr"))?;
    let manifest_path = dir.join("manifest.jsonl");
    let mut lines = String::new();
    for (i, s) in samples.iter().enumerate() {
        let lr_rel = format!("lr/{i:05}.png");
        let hr_rel = format!("hr/{i:05}.png");
        save_png(&s.lr, &dir.join(&lr_rel))?;
        save_png(&s.hr, &dir.join(&hr_rel))?;
        let rec = Record {
            lr_path: lr_rel,
            hr_path: hr_rel,
            label: s.label.clone(),
            difficulty: s.difficulty,
        };
        lines.push_str(&serde_json::to_string(&rec)?);
        lines.push('\n');
    }
    std::fs::write(&manifest_path, lines)?;
    Ok(manifest_path)
}

/// Stacks per-sample images into (lr batch, hr batch, labels, difficulties).
/// All samples must share their LR dimensions.
pub fn stack_samples(
    samples: &[PairedSample],
) -> Result<(ImageTensor, ImageTensor, Vec<String>, Vec<Difficulty>)> {
    if samples.is_empty() {
        return Err(Error::EmptyDataset("cannot stack zero samples".into()));
    }
    let first = samples[0].lr.dims();
    for (i, s) in samples.iter().enumerate() {
        if s.lr.dims() != first {
            return Err(Error::msg(format!(
                "sample {i} has lr dims {:?} but sample 0 has {:?}; \
                 batches need uniform sizes",
                s.lr.dims(),
                first
            )));
        }
    }
    let lrs: Vec<&Tensor> = samples.iter().map(|s| s.lr.tensor()).collect();
    let hrs: Vec<&Tensor> = samples.iter().map(|s| s.hr.tensor()).collect();
    let lr = ImageTensor::new(Tensor::cat(&lrs, 0)?, ImageRole::Lr)?;
    let hr = ImageTensor::new(Tensor::cat(&hrs, 0)?, ImageRole::Hr)?;
    let labels = samples.iter().map(|s| s.label.clone()).collect();
    let diffs = samples.iter().map(|s| s.difficulty).collect();
    Ok((lr, hr, labels, diffs))
}

/// Deterministic train/holdout split: shuffles by `seed` and cuts off
/// `holdout_fraction` of the samples for the second set.
pub fn split_samples(
    mut samples: Vec<PairedSample>,
    holdout_fraction: f64,
    seed: u64,
) -> Result<(Vec<PairedSample>, Vec<PairedSample>)> {
    if !(0.0..1.0).contains(&holdout_fraction) {
        return Err(Error::msg(format!(
            "holdout fraction must be in [0, 1), got {holdout_fraction}"
        )));
    }
    let n = samples.len();
    let order = crate::batching::shuffled_indices(n, seed, 0);
    let mut reordered = Vec::with_capacity(n);
    // Drain via the shuffled order without cloning tensors.
    let mut slots: Vec<Option<PairedSample>> = samples.drain(..).map(Some).collect();
    for i in order {
        reordered.push(slots[i].take().expect("each index visited once"));
    }
    let holdout = ((n as f64) * holdout_fraction).round() as usize;
    let held = reordered.split_off(n - holdout);
    Ok((reordered, held))
}
