//! Paired stereo PNG directories and their manifests.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use ccsbesr_core::data::StereoSample;

use crate::image_io::read_png;

pub const MANIFEST_FILE: &str = "manifest.tsv";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PairEntry {
    pub id: String,
    pub left: PathBuf,
    pub right: PathBuf,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub split: String,
    pub entries: Vec<PairEntry>,
}

impl DatasetManifest {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Resolves the split directory: `root/<split>` when it exists, else `root`.
pub fn split_dir(root: &Path, split: &str) -> PathBuf {
    let sub = root.join(split);
    if !split.is_empty() && sub.is_dir() {
        sub
    } else {
        root.to_path_buf()
    }
}

/// Reads `manifest.tsv` (`id<TAB>left<TAB>right`, paths relative to the split
/// directory) when present, otherwise pairs `left/<id>.png` with
/// `right/<id>.png`. Entries are sorted by id and every file must exist.
pub fn load_manifest(root: &Path, split: &str) -> Result<DatasetManifest> {
    let dir = split_dir(root, split);
    let manifest_path = dir.join(MANIFEST_FILE);
    let mut by_id: BTreeMap<String, PairEntry> = BTreeMap::new();
    if manifest_path.is_file() {
        let text = fs::read_to_string(&manifest_path)
            .with_context(|| format!("{}: cannot read", manifest_path.display()))?;
        for (n, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() != 3 {
                bail!(
                    "{}:{}: expected id<TAB>left<TAB>right, got {} fields",
                    manifest_path.display(),
                    n + 1,
                    fields.len()
                );
            }
            let entry = PairEntry {
                id: fields[0].to_string(),
                left: dir.join(fields[1]),
                right: dir.join(fields[2]),
            };
            if by_id.insert(entry.id.clone(), entry).is_some() {
                bail!("{}:{}: duplicate id {:?}", manifest_path.display(), n + 1, fields[0]);
            }
        }
    } else {
        let left_dir = dir.join("left");
        if left_dir.is_dir() {
            for item in fs::read_dir(&left_dir).with_context(|| format!("{}: cannot list", left_dir.display()))? {
                let path = item?.path();
                if path.extension().and_then(|e| e.to_str()) != Some("png") {
                    continue;
                }
                let id = path
                    .file_stem()
                    .and_then(|s| s.to_str())
                    .with_context(|| format!("{}: file name is not UTF-8", path.display()))?
                    .to_string();
                let right = dir.join("right").join(format!("{id}.png"));
                by_id.insert(id.clone(), PairEntry { id, left: path, right });
            }
        }
    }
    for e in by_id.values() {
        for p in [&e.left, &e.right] {
            if !p.is_file() {
                bail!("pair {:?}: missing file {}", e.id, p.display());
            }
        }
    }
    Ok(DatasetManifest {
        root: root.to_path_buf(),
        split: split.to_string(),
        entries: by_id.into_values().collect(),
    })
}

/// Decodes pair `index` and derives its LR views by bicubic downsampling.
pub fn load_sample(manifest: &DatasetManifest, index: usize, scale: usize) -> Result<StereoSample> {
    let e = manifest
        .entries
        .get(index)
        .with_context(|| format!("sample index {} out of range ({} pairs)", index, manifest.len()))?;
    let left = read_png(&e.left)?;
    let right = read_png(&e.right)?;
    StereoSample::from_hr(e.id.clone(), left, right, scale)
        .with_context(|| format!("pair {:?} ({}, {})", e.id, e.left.display(), e.right.display()))
}

/// Loads every sample, spreading decoding over up to `threads` workers. The
/// result order always follows the manifest.
pub fn load_all(manifest: &DatasetManifest, scale: usize, threads: usize) -> Result<Vec<StereoSample>> {
    let n = manifest.len();
    let threads = threads.clamp(1, n.max(1));
    let mut slots: Vec<Option<Result<StereoSample>>> = (0..n).map(|_| None).collect();
    std::thread::scope(|s| {
        let chunk = n.div_ceil(threads).max(1);
        for (t, part) in slots.chunks_mut(chunk).enumerate() {
            s.spawn(move || {
                for (k, slot) in part.iter_mut().enumerate() {
                    *slot = Some(load_sample(manifest, t * chunk + k, scale));
                }
            });
        }
    });
    slots.into_iter().map(|s| s.expect("every slot filled")).collect()
}
