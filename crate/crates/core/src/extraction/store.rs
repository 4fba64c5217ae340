//! On-disk feature store.
//!
//! ```text
//! <root>/manifest.jsonl
//! <root>/<model>/<sample_key>/<feature-name>.bin
//! ```
//!
//! Each `.bin` holds little-endian `f32` values in row-major `C x H x W`
//! order. Each manifest line describes one record; a later line for the
//! same record supersedes earlier ones.

use std::collections::BTreeMap;
use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Mutex, RwLock};

use ndarray::Array3;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{check_key, FeatureName, FeatureRecord, FeatureStats};
use crate::error::{Error, Result};

const MANIFEST: &str = "manifest.jsonl";
const DTYPE: &str = "f32le";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub model: String,
    pub sample_key: String,
    pub activation_id: FeatureName,
    pub shape: [usize; 3],
    pub dtype: String,
    /// Hex SHA-256 of the record file.
    pub checksum: String,
    pub stats: FeatureStats,
}

type Key = (String, FeatureName, String);

fn key_of(e: &ManifestEntry) -> Key {
    (e.model.clone(), e.activation_id.clone(), e.sample_key.clone())
}

/// Records are written whole to a temporary file and renamed into place;
/// manifest lines are appended under a lock, one write per line. Any
/// number of threads may read and write through one store.
#[derive(Debug)]
pub struct FeatureStore {
    root: PathBuf,
    index: RwLock<BTreeMap<Key, ManifestEntry>>,
    manifest: Mutex<()>,
    tmp_counter: AtomicU64,
}

impl FeatureStore {
    /// Opens or creates a store rooted at `root`.
    pub fn open(root: impl AsRef<Path>) -> Result<Self> {
        let root = root.as_ref().to_path_buf();
        fs::create_dir_all(&root).map_err(|e| Error::io(&root, e))?;
        let path = root.join(MANIFEST);
        let mut index = BTreeMap::new();
        if path.exists() {
            let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
            let complete = text.ends_with('\n');
            let lines: Vec<_> = text.lines().collect();
            for (i, line) in lines.iter().enumerate() {
                if line.trim().is_empty() {
                    continue;
                }
                match serde_json::from_str::<ManifestEntry>(line) {
                    Ok(e) => {
                        index.insert(key_of(&e), e);
                    }
                    Err(_) if i + 1 == lines.len() && !complete => {}
                    Err(err) => {
                        return Err(Error::Corruption(format!(
                            "{} line {}: {err}",
                            path.display(),
                            i + 1
                        )))
                    }
                }
            }
        }
        Ok(Self {
            root,
            index: RwLock::new(index),
            manifest: Mutex::new(()),
            tmp_counter: AtomicU64::new(0),
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    fn record_path(&self, model: &str, name: &FeatureName, sample_key: &str) -> PathBuf {
        self.root
            .join(model)
            .join(sample_key)
            .join(format!("{}.bin", name.file_stem()))
    }

    pub fn write(&self, record: &FeatureRecord) -> Result<()> {
        check_key("model name", &record.model)?;
        check_key("sample key", &record.sample_key)?;
        let mut bytes = Vec::with_capacity(record.data.len() * 4);
        for v in record.data.iter() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        let entry = ManifestEntry {
            model: record.model.clone(),
            sample_key: record.sample_key.clone(),
            activation_id: record.name.clone(),
            shape: record.shape(),
            dtype: DTYPE.to_string(),
            checksum: hex::encode(Sha256::digest(&bytes)),
            stats: record.stats,
        };
        let path = self.record_path(&record.model, &record.name, &record.sample_key);
        let dir = path.parent().expect("record path has a parent");
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let tmp = dir.join(format!(
            ".{}.{}.{}.tmp",
            record.name.file_stem(),
            std::process::id(),
            self.tmp_counter.fetch_add(1, Ordering::Relaxed)
        ));
        fs::write(&tmp, &bytes).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, &path).map_err(|e| Error::io(&path, e))?;

        let mut line = serde_json::to_string(&entry)?;
        line.push('\n');
        let _guard = self.manifest.lock().expect("manifest lock");
        let manifest = self.root.join(MANIFEST);
        let mut f = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&manifest)
            .map_err(|e| Error::io(&manifest, e))?;
        f.write_all(line.as_bytes()).map_err(|e| Error::io(&manifest, e))?;
        self.index
            .write()
            .expect("index lock")
            .insert(key_of(&entry), entry);
        Ok(())
    }

    pub fn entry(&self, model: &str, name: &FeatureName, sample_key: &str) -> Option<ManifestEntry> {
        self.index
            .read()
            .expect("index lock")
            .get(&(model.to_string(), name.clone(), sample_key.to_string()))
            .cloned()
    }

    pub fn contains(&self, model: &str, name: &FeatureName, sample_key: &str) -> bool {
        self.entry(model, name, sample_key).is_some()
    }

    pub fn read(&self, model: &str, name: &FeatureName, sample_key: &str) -> Result<FeatureRecord> {
        let entry = self
            .entry(model, name, sample_key)
            .ok_or_else(|| Error::NotFound(format!("{model} {name} for sample {sample_key}")))?;
        let path = self.record_path(model, name, sample_key);
        let bytes = fs::read(&path).map_err(|e| {
            if e.kind() == std::io::ErrorKind::NotFound {
                Error::Corruption(format!("manifest lists missing file {}", path.display()))
            } else {
                Error::io(&path, e)
            }
        })?;
        if hex::encode(Sha256::digest(&bytes)) != entry.checksum {
            return Err(Error::Corruption(format!("checksum mismatch for {}", path.display())));
        }
        let [c, h, w] = entry.shape;
        if bytes.len() != c * h * w * 4 {
            return Err(Error::Corruption(format!(
                "{} holds {} bytes for shape {:?}",
                path.display(),
                bytes.len(),
                entry.shape
            )));
        }
        let values: Vec<f32> = bytes
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        let data = Array3::from_shape_vec((c, h, w), values).map_err(|e| Error::Corruption(e.to_string()))?;
        FeatureRecord::new(model, name.clone(), sample_key, data)
    }

    /// Current manifest entries in key order.
    pub fn entries(&self) -> Vec<ManifestEntry> {
        self.index.read().expect("index lock").values().cloned().collect()
    }

    pub fn len(&self) -> usize {
        self.index.read().expect("index lock").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Sample keys holding at least one record of `model`, sorted.
    pub fn sample_keys(&self, model: &str) -> Vec<String> {
        let mut keys: Vec<_> = self
            .index
            .read()
            .expect("index lock")
            .keys()
            .filter(|(m, _, _)| m == model)
            .map(|(_, _, s)| s.clone())
            .collect();
        keys.sort();
        keys.dedup();
        keys
    }

    /// The `(name, sample)` pairs from the cross product that are absent.
    pub fn missing<'a>(
        &self,
        model: &str,
        names: impl IntoIterator<Item = &'a FeatureName>,
        sample_keys: &[String],
    ) -> Vec<(FeatureName, String)> {
        let index = self.index.read().expect("index lock");
        let mut gaps = Vec::new();
        for name in names {
            for key in sample_keys {
                if !index.contains_key(&(model.to_string(), name.clone(), key.clone())) {
                    gaps.push((name.clone(), key.clone()));
                }
            }
        }
        gaps
    }

    /// Rewrites the manifest with one line per live record, replacing it
    /// atomically.
    pub fn compact(&self) -> Result<()> {
        let _guard = self.manifest.lock().expect("manifest lock");
        let mut text = String::new();
        for e in self.index.read().expect("index lock").values() {
            text.push_str(&serde_json::to_string(e)?);
            text.push('\n');
        }
        let manifest = self.root.join(MANIFEST);
        let tmp = self.root.join(format!(".{MANIFEST}.{}.tmp", std::process::id()));
        fs::write(&tmp, text).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, &manifest).map_err(|e| Error::io(&manifest, e))
    }
}
