use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    /// Relative paths resolve against the manifest's directory.
    pub path: PathBuf,
    pub split: Split,
}

/// TOML dataset listing: class names, neighbor pairs and labelled volume files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub class_names: Vec<String>,
    #[serde(default)]
    pub adjacency: Vec<[usize; 2]>,
    #[serde(default)]
    pub volumes: Vec<ManifestEntry>,
    #[serde(skip)]
    pub root: PathBuf,
}

impl DatasetManifest {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)?;
        let mut m: DatasetManifest =
            toml::from_str(&text).map_err(|e| Error::InvalidConfig(format!("{}: {e}", path.display())))?;
        m.root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        if m.class_names.len() < 2 {
            return Err(Error::InvalidConfig(
                "manifest needs background plus at least one class".into(),
            ));
        }
        Ok(m)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let text = toml::to_string(self).map_err(|e| Error::Serde(e.to_string()))?;
        std::fs::write(path, text)?;
        Ok(())
    }

    pub fn resolve(&self, entry: &ManifestEntry) -> PathBuf {
        if entry.path.is_absolute() {
            entry.path.clone()
        } else {
            self.root.join(&entry.path)
        }
    }

    pub fn entries(&self, split: Split) -> impl Iterator<Item = &ManifestEntry> {
        self.volumes.iter().filter(move |e| e.split == split)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toml_roundtrip_and_resolution() {
        let dir = tempfile::tempdir().unwrap();
        let m = DatasetManifest {
            class_names: vec!["background".into(), "liver".into()],
            adjacency: vec![],
            volumes: vec![ManifestEntry {
                path: "a.vvol".into(),
                split: Split::Train,
            }],
            root: PathBuf::new(),
        };
        let p = dir.path().join("m.toml");
        m.save(&p).unwrap();
        let back = DatasetManifest::load(&p).unwrap();
        assert_eq!(back.volumes, m.volumes);
        assert_eq!(back.resolve(&back.volumes[0]), dir.path().join("a.vvol"));
        assert_eq!(back.entries(Split::Test).count(), 0);
    }

    #[test]
    fn unknown_keys_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.toml");
        std::fs::write(&p, "class_names = [\"background\", \"x\"]\nbogus = 1\n").unwrap();
        assert!(DatasetManifest::load(&p).is_err());
    }
}
