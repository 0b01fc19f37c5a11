//! Output files and dataset directory layout.

use std::io::Write;
use std::path::{Path, PathBuf};

use albumseq::data::{concat_regions, load_dataset, LabelVocabulary, PhotoRecord, SplitPair, CONCAT_REGION};
use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub const SET_0: &str = "set_0.jsonl";
pub const SET_1: &str = "set_1.jsonl";
pub const VOCAB: &str = "vocab.txt";
pub const GEN_METADATA: &str = "metadata.json";
pub const METRICS: &str = "metrics.json";
pub const PREDICTIONS: &str = "predictions.jsonl";

/// Writes through a temporary sibling and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let name = path
        .file_name()
        .with_context(|| format!("{} has no file name", path.display()))?
        .to_string_lossy();
    let tmp = dir.join(format!(".{name}.tmp{}", std::process::id()));
    let result = (|| {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        std::fs::rename(&tmp, path)
    })();
    if result.is_err() {
        let _ = std::fs::remove_file(&tmp);
    }
    result.with_context(|| format!("writing {}", path.display()))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_atomic(path, text.as_bytes())
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

pub fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

pub fn vocab_fingerprint(vocab: &LabelVocabulary) -> String {
    let mut hasher = Sha256::new();
    for name in vocab.names() {
        hasher.update(name.as_bytes());
        hasher.update(b"\n");
    }
    hasher.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

pub fn split_path(dir: &Path, split: usize) -> PathBuf {
    dir.join(if split == 0 { SET_0 } else { SET_1 })
}

pub struct Dataset {
    pub splits: SplitPair,
    pub vocab: LabelVocabulary,
    pub fingerprint: String,
}

pub fn load_dataset_dir(dir: &Path) -> Result<Dataset> {
    let vocab_path = dir.join(VOCAB);
    let load = |split| {
        let path = split_path(dir, split);
        load_dataset(&path, &vocab_path)
            .map(|(photos, _)| photos)
            .with_context(|| format!("loading {}", path.display()))
    };
    let set_0 = load(0)?;
    let set_1 = load(1)?;
    let vocab = LabelVocabulary::load(&vocab_path).with_context(|| format!("loading {}", vocab_path.display()))?;
    let fingerprint = vocab_fingerprint(&vocab);
    Ok(Dataset {
        splits: SplitPair { set_0, set_1 },
        vocab,
        fingerprint,
    })
}

/// Resolves a region name against the photos. `a+b` names the
/// concatenation of regions `a` and `b`, stored under that name.
pub fn prepare_region(photos: &[PhotoRecord], region: &str) -> Result<Vec<PhotoRecord>> {
    if !region.contains('+') {
        return Ok(photos.to_vec());
    }
    let parts: Vec<&str> = region.split('+').collect();
    if parts.iter().any(|p| p.is_empty()) {
        bail!("malformed region `{region}`");
    }
    photos
        .iter()
        .map(|p| {
            let mut joined = concat_regions(p, &parts)?;
            for inst in &mut joined.instances {
                if let Some(v) = inst.region_feats.remove(CONCAT_REGION) {
                    inst.region_feats.insert(region.to_string(), v);
                }
            }
            Ok(joined)
        })
        .collect()
}

pub fn checkpoint_name(region: &str, split: usize) -> String {
    format!("model_{region}_{split}.ckpt")
}

pub fn train_report_name(region: &str, split: usize) -> String {
    format!("train_{region}_{split}.json")
}

pub fn train_log_name(region: &str, split: usize) -> String {
    format!("train_{region}_{split}.log")
}
