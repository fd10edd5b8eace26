//! Dataset manifests: one JSON record per line.

use std::collections::HashSet;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::ImageTensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Source,
    Style,
    SelfAug,
    CrossAug,
}

impl Provenance {
    pub fn as_str(self) -> &'static str {
        match self {
            Provenance::Source => "source",
            Provenance::Style => "style",
            Provenance::SelfAug => "self_aug",
            Provenance::CrossAug => "cross_aug",
        }
    }

    pub fn is_augmented(self) -> bool {
        matches!(self, Provenance::SelfAug | Provenance::CrossAug)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub image_path: PathBuf,
    pub split: Split,
    pub seed: u64,
    pub provenance: Provenance,
    pub t0: Option<f64>,
    pub guide_index: Option<usize>,
}

/// Ordered list of images plus the directory their relative paths resolve against.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub entries: Vec<ManifestEntry>,
}

impl DatasetManifest {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        DatasetManifest {
            root: root.into(),
            entries: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn resolve(&self, entry: &ManifestEntry) -> PathBuf {
        self.root.join(&entry.image_path)
    }

    pub fn filter(&self, pred: impl Fn(&ManifestEntry) -> bool) -> DatasetManifest {
        DatasetManifest {
            root: self.root.clone(),
            entries: self.entries.iter().filter(|e| pred(e)).cloned().collect(),
        }
    }

    pub fn seeds(&self) -> HashSet<u64> {
        self.entries.iter().map(|e| e.seed).collect()
    }

    /// Re-expresses every path relative to `root` where possible (absolute otherwise).
    pub fn rebased(&self, root: &Path) -> DatasetManifest {
        let entries = self
            .entries
            .iter()
            .map(|e| {
                let abs = self.resolve(e);
                let rel = abs
                    .strip_prefix(root)
                    .map(Path::to_path_buf)
                    .unwrap_or(abs);
                ManifestEntry {
                    image_path: rel,
                    ..e.clone()
                }
            })
            .collect();
        DatasetManifest {
            root: root.to_path_buf(),
            entries,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for e in &self.entries {
            if !seen.insert(&e.image_path) {
                return Err(Error::Integrity(format!(
                    "duplicate image path {}",
                    e.image_path.display()
                )));
            }
            let aug = e.provenance.is_augmented();
            if aug != e.t0.is_some() || aug != e.guide_index.is_some() {
                return Err(Error::Integrity(format!(
                    "{}: provenance {} must {}carry t0 and guide_index",
                    e.image_path.display(),
                    e.provenance.as_str(),
                    if aug { "" } else { "not " }
                )));
            }
        }
        Ok(())
    }

    pub fn load_image(&self, index: usize) -> Result<ImageTensor> {
        ImageTensor::load_png(&self.resolve(&self.entries[index]))
    }

    pub fn load_all(&self) -> Result<Vec<ImageTensor>> {
        (0..self.len()).map(|i| self.load_image(i)).collect()
    }

    pub fn to_jsonl(&self) -> String {
        let mut s = String::new();
        for e in &self.entries {
            s.push_str(&serde_json::to_string(e).expect("entry serializes"));
            s.push('\n');
        }
        s
    }

    /// Writes the manifest; relative paths in it resolve against the manifest's directory.
    /// Leaves an identical existing file untouched.
    pub fn save(&self, path: &Path) -> Result<()> {
        let dir = path.parent().unwrap_or(Path::new("."));
        let text = self.rebased(dir).to_jsonl();
        if fs::read(path).is_ok_and(|old| old == text.as_bytes()) {
            return Ok(());
        }
        write_atomic(path, text.as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let root = path.parent().unwrap_or(Path::new(".")).to_path_buf();
        let mut entries = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let e: ManifestEntry = serde_json::from_str(line).map_err(|e| {
                Error::Format(format!("{}:{}: {e}", path.display(), i + 1))
            })?;
            entries.push(e);
        }
        Ok(DatasetManifest { root, entries })
    }
}

pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let tmp = path.with_extension("partial");
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn entry(p: &str, prov: Provenance, t0: Option<f64>, k: Option<usize>) -> ManifestEntry {
        ManifestEntry {
            image_path: p.into(),
            split: Split::Train,
            seed: 1,
            provenance: prov,
            t0,
            guide_index: k,
        }
    }

    #[test]
    fn validation_rules() {
        let mut m = DatasetManifest::new("/r");
        m.entries.push(entry("a.png", Provenance::Source, None, None));
        m.entries.push(entry("b.png", Provenance::SelfAug, Some(0.8), Some(0)));
        m.validate().unwrap();
        m.entries.push(entry("a.png", Provenance::Style, None, None));
        assert!(matches!(m.validate(), Err(Error::Integrity(_))));
        m.entries.pop();
        m.entries.push(entry("c.png", Provenance::CrossAug, Some(0.8), None));
        assert!(m.validate().is_err());
        m.entries.pop();
        m.entries.push(entry("d.png", Provenance::Style, Some(0.8), None));
        assert!(m.validate().is_err());
    }

    #[test]
    fn jsonl_field_names_and_reload() {
        let dir = tempfile::tempdir().unwrap();
        let mut m = DatasetManifest::new(dir.path());
        m.entries.push(entry("images/a.png", Provenance::CrossAug, Some(0.6), Some(3)));
        let line = m.to_jsonl();
        for key in ["image_path", "split", "seed", "provenance", "t0", "guide_index", "cross_aug"] {
            assert!(line.contains(key), "{line}");
        }
        let path = dir.path().join("manifest.jsonl");
        m.save(&path).unwrap();
        assert_eq!(DatasetManifest::load(&path).unwrap(), m);
    }

    #[test]
    fn rebase_keeps_resolution() {
        let mut m = DatasetManifest::new("/run/data");
        m.entries.push(entry("images/a.png", Provenance::Source, None, None));
        let r = m.rebased(Path::new("/run"));
        assert_eq!(r.entries[0].image_path, PathBuf::from("data/images/a.png"));
        assert_eq!(r.resolve(&r.entries[0]), m.resolve(&m.entries[0]));
    }
}
