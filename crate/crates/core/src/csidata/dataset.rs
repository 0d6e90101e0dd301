//! Dataset manifests and loading of (CSI container, PLY) pairs.
//!
//! A manifest is a JSON file:
//!
//! ```json
//! {
//!   "version": 1,
//!   "generator": "c2pc synth",
//!   "seed": 7,
//!   "entries": [
//!     {"id": "sample_0000", "csi": "sample_0000.csi", "ply": "sample_0000.ply",
//!      "seed": 123, "split": "train"}
//!   ]
//! }
//! ```
//!
//! Paths are relative to the manifest's directory. Unknown fields are kept
//! in `extra` so manifests written by other tools load unchanged.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::csidata::{load_csi_container, preprocess, read_ply, ModelInput, PointCloud};
use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    #[serde(default)]
    pub id: String,
    pub csi: String,
    pub ply: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split: Option<String>,
    #[serde(flatten)]
    pub extra: serde_json::Map<String, serde_json::Value>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    #[serde(default)]
    pub generator: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    /// Generator settings, recorded verbatim.
    #[serde(default, skip_serializing_if = "serde_json::Value::is_null")]
    pub config: serde_json::Value,
    pub entries: Vec<ManifestEntry>,
    #[serde(flatten)]
    pub extra: serde_json::Map<String, serde_json::Value>,
}

impl Manifest {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Parse(format!("{}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| Error::Parse(format!("{}: {e}", path.display())))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        fs::write(path, text)?;
        Ok(())
    }
}

/// One preprocessed training/evaluation example.
#[derive(Debug, Clone)]
pub struct Sample {
    pub id: String,
    pub input: ModelInput,
    pub target: PointCloud,
}

/// Resolves `path` to a manifest file: a directory means its
/// `manifest.json`.
pub fn manifest_path(path: impl AsRef<Path>) -> PathBuf {
    let path = path.as_ref();
    if path.is_dir() {
        path.join(MANIFEST_FILE)
    } else {
        path.to_path_buf()
    }
}

/// Loads every entry of a manifest (or a directory holding one).
pub fn load_dataset(path: impl AsRef<Path>) -> Result<Vec<Sample>> {
    let file = manifest_path(path);
    let manifest = Manifest::load(&file)?;
    let root = file.parent().unwrap_or(Path::new("."));
    load_entries(root, &manifest.entries)
}

pub fn load_entries(root: &Path, entries: &[ManifestEntry]) -> Result<Vec<Sample>> {
    entries
        .iter()
        .map(|e| {
            let csi = root.join(&e.csi);
            let sample = load_csi_container(&csi).map_err(|err| with_path(err, &csi))?;
            let ply = root.join(&e.ply);
            let target = read_ply(&ply).map_err(|err| with_path(err, &ply))?;
            let id = if e.id.is_empty() { e.csi.clone() } else { e.id.clone() };
            Ok(Sample {
                id,
                input: preprocess(&sample)?,
                target,
            })
        })
        .collect()
}

fn with_path(err: Error, path: &Path) -> Error {
    match err {
        Error::Io(e) => Error::Parse(format!("{}: {e}", path.display())),
        Error::Format { offset, msg } => Error::Format {
            offset,
            msg: format!("{}: {msg}", path.display()),
        },
        other => other,
    }
}

/// Seeded shuffle, then the first `round(n * val_fraction)` samples (at
/// least one, and never all of them) become validation.
pub fn split_train_val(samples: Vec<Sample>, val_fraction: f64, seed: u64) -> Result<(Vec<Sample>, Vec<Sample>)> {
    if !(0.0..1.0).contains(&val_fraction) {
        return Err(Error::config(format!(
            "val_fraction must be in [0, 1), got {val_fraction}"
        )));
    }
    let n = samples.len();
    if n < 2 {
        return Err(Error::config(format!(
            "need at least 2 samples for a train/validation split, got {n}"
        )));
    }
    let n_val = ((n as f64 * val_fraction).round() as usize).clamp(1, n - 1);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut slots: Vec<Option<Sample>> = samples.into_iter().map(Some).collect();
    let mut take = |i: &usize| slots[*i].take().expect("each index once");
    let val: Vec<Sample> = order[..n_val].iter().map(&mut take).collect();
    let train: Vec<Sample> = order[n_val..].iter().map(&mut take).collect();
    Ok((train, val))
}
