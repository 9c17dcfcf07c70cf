//! JSON-lines dataset manifests and ID-disjoint train/val splitting.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::image::DrawingImage;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
        })
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            other => Err(Error::invalid(format!("unknown split `{other}`"))),
        }
    }
}

/// One manifest line. `image_path` is relative to the manifest's directory.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub image_path: String,
    pub patent_id: String,
    pub view_index: u32,
    pub split: Split,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DatasetManifest {
    pub root_dir: PathBuf,
    pub entries: Vec<ManifestEntry>,
}

impl DatasetManifest {
    pub fn new(root_dir: impl Into<PathBuf>, entries: Vec<ManifestEntry>) -> Self {
        Self {
            root_dir: root_dir.into(),
            entries,
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn resolve(&self, entry: &ManifestEntry) -> PathBuf {
        self.root_dir.join(&entry.image_path)
    }

    pub fn entries_in(&self, split: Split) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(move |e| e.split == split)
    }

    /// Sorted distinct patent IDs, optionally restricted to one split.
    pub fn patent_ids(&self, split: Option<Split>) -> Vec<String> {
        let ids: BTreeSet<&str> = self
            .entries
            .iter()
            .filter(|e| split.is_none_or(|s| e.split == s))
            .map(|e| e.patent_id.as_str())
            .collect();
        ids.into_iter().map(str::to_owned).collect()
    }

    /// Checks split disjointness, duplicate views and val group sizes.
    /// Messages carry 1-based line numbers.
    pub fn validate(&self) -> Result<()> {
        let mut seen: HashMap<(&str, u32), usize> = HashMap::new();
        let mut split_of: HashMap<&str, (Split, usize)> = HashMap::new();
        for (i, e) in self.entries.iter().enumerate() {
            let line = i + 1;
            if let Some(prev) = seen.insert((&e.patent_id, e.view_index), line) {
                return Err(Error::Manifest(format!(
                    "line {line}: duplicate (patent_id {}, view_index {}) first seen on line {prev}",
                    e.patent_id, e.view_index
                )));
            }
            match split_of.get(e.patent_id.as_str()) {
                Some(&(s, first)) if s != e.split => {
                    return Err(Error::Manifest(format!(
                        "line {line}: patent_id {} appears in both {s} (line {first}) and {}",
                        e.patent_id, e.split
                    )));
                }
                Some(_) => {}
                None => {
                    split_of.insert(&e.patent_id, (e.split, line));
                }
            }
        }
        let mut val_counts: BTreeMap<&str, usize> = BTreeMap::new();
        for e in self.entries_in(Split::Val) {
            *val_counts.entry(&e.patent_id).or_default() += 1;
        }
        let lonely: Vec<&str> = val_counts
            .iter()
            .filter(|(_, &n)| n < 2)
            .map(|(id, _)| *id)
            .collect();
        if !lonely.is_empty() {
            return Err(Error::Manifest(format!(
                "val patent_ids need at least 2 images: {}",
                lonely.join(", ")
            )));
        }
        Ok(())
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for e in &self.entries {
            // serialization of this struct cannot fail
            let _ = writeln!(out, "{}", serde_json::to_string(e).unwrap_or_default());
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_jsonl()).map_err(|e| Error::io(path, e))
    }

    /// Decodes every image of a split, in manifest order.
    pub fn load_images(&self, split: Split) -> Result<Vec<DrawingImage>> {
        self.entries_in(split)
            .map(|e| DrawingImage::load(&self.resolve(e), e.patent_id.clone(), e.view_index))
            .collect()
    }
}

/// Parses a manifest from JSON lines; `root_dir` anchors relative image paths.
pub fn parse_manifest(text: &str, root_dir: impl Into<PathBuf>) -> Result<DatasetManifest> {
    let mut entries = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let entry: ManifestEntry = serde_json::from_str(line)
            .map_err(|e| Error::Manifest(format!("line {}: {e}", i + 1)))?;
        entries.push(entry);
    }
    let manifest = DatasetManifest::new(root_dir, entries);
    manifest.validate()?;
    Ok(manifest)
}

/// Reads and validates a manifest, including the existence of every image.
pub fn load_manifest(path: &Path) -> Result<DatasetManifest> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let manifest = parse_manifest(&text, root)?;
    for (i, e) in manifest.entries.iter().enumerate() {
        let p = manifest.resolve(e);
        if !p.is_file() {
            return Err(Error::Manifest(format!(
                "line {}: image file not found: {}",
                i + 1,
                p.display()
            )));
        }
    }
    Ok(manifest)
}

/// Reassigns whole patent IDs to train/val. `round(ids * val_fraction)` IDs go to val.
pub fn split_by_id(manifest: &DatasetManifest, val_fraction: f64, seed: u64) -> Result<DatasetManifest> {
    if !(val_fraction > 0.0 && val_fraction < 1.0) {
        return Err(Error::invalid(format!(
            "val_fraction must be in (0, 1), got {val_fraction}"
        )));
    }
    let mut ids = manifest.patent_ids(None);
    let n_val = (ids.len() as f64 * val_fraction).round() as usize;
    if n_val == 0 || n_val == ids.len() {
        return Err(Error::invalid(format!(
            "splitting {} patent ids with val_fraction {val_fraction} leaves a split empty",
            ids.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ids.shuffle(&mut rng);
    let val: BTreeSet<&str> = ids[..n_val].iter().map(String::as_str).collect();
    let entries = manifest
        .entries
        .iter()
        .map(|e| ManifestEntry {
            split: if val.contains(e.patent_id.as_str()) {
                Split::Val
            } else {
                Split::Train
            },
            ..e.clone()
        })
        .collect();
    let out = DatasetManifest::new(manifest.root_dir.clone(), entries);
    out.validate()?;
    Ok(out)
}
