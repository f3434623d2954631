use std::path::Path;

use serde::{Deserialize, Serialize};

use super::io::write_volume;
use super::manifest::{DatasetManifest, ManifestEntry, Split};
use super::phantom::{generate_phantom, Adjacency, PhantomSpec};
use super::volume::{LabelVolume, Volume};
use crate::error::{Error, Result};

/// Parameters of a generated phantom dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticDataset {
    pub shape: [usize; 3],
    pub foreground_classes: usize,
    pub train_volumes: usize,
    pub test_volumes: usize,
    pub seed: u64,
}

impl Default for SyntheticDataset {
    fn default() -> Self {
        Self {
            shape: [32, 32, 32],
            foreground_classes: 4,
            train_volumes: 2,
            test_volumes: 0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct GeneratedDataset {
    pub class_names: Vec<String>,
    /// Union of the contacts observed in every volume.
    pub adjacency: Adjacency,
    pub volumes: Vec<(Volume, LabelVolume, Split)>,
}

impl GeneratedDataset {
    pub fn split(&self, split: Split) -> Vec<(Volume, LabelVolume)> {
        self.volumes
            .iter()
            .filter(|v| v.2 == split)
            .map(|(v, l, _)| (v.clone(), l.clone()))
            .collect()
    }
}

impl SyntheticDataset {
    pub fn validate(&self) -> Result<()> {
        if self.shape.contains(&0) || self.foreground_classes == 0 {
            return Err(Error::InvalidConfig("data.shape and data.foreground_classes must be positive".into()));
        }
        if self.train_volumes + self.test_volumes == 0 {
            return Err(Error::InvalidConfig("data needs at least one volume".into()));
        }
        Ok(())
    }

    /// Volume `i` uses phantom seed `seed + i`; training volumes come first.
    pub fn generate(&self) -> Result<GeneratedDataset> {
        self.validate()?;
        let n = self.foreground_classes + 1;
        let mut pairs = Vec::new();
        let mut volumes = Vec::new();
        let mut class_names = Vec::new();
        for i in 0..self.train_volumes + self.test_volumes {
            let spec = PhantomSpec::synthetic(self.shape, self.foreground_classes, self.seed + i as u64)?;
            let (v, l, adj) = generate_phantom(&spec)?;
            class_names = spec.class_names();
            pairs.extend(adj.pairs());
            let split = if i < self.train_volumes { Split::Train } else { Split::Test };
            volumes.push((v, l, split));
        }
        pairs.sort_unstable();
        pairs.dedup();
        Ok(GeneratedDataset {
            class_names,
            adjacency: Adjacency::from_pairs(n, &pairs)?,
            volumes,
        })
    }

    /// Writes every volume plus `manifest.toml` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<DatasetManifest> {
        let data = self.generate()?;
        std::fs::create_dir_all(dir)?;
        let mut entries = Vec::new();
        for (i, (v, l, split)) in data.volumes.iter().enumerate() {
            let name = format!("phantom-{i:03}.vvol");
            write_volume(dir.join(&name), v, Some(l))?;
            entries.push(ManifestEntry {
                path: name.into(),
                split: *split,
            });
        }
        let manifest = DatasetManifest {
            class_names: data.class_names,
            adjacency: data.adjacency.pairs(),
            volumes: entries,
            root: dir.to_path_buf(),
        };
        manifest.save(dir.join("manifest.toml"))?;
        Ok(manifest)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn written_dataset_reloads() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = SyntheticDataset {
            shape: [12, 12, 12],
            foreground_classes: 2,
            train_volumes: 2,
            test_volumes: 1,
            seed: 5,
        };
        let m = cfg.write(dir.path()).unwrap();
        let back = DatasetManifest::load(dir.path().join("manifest.toml")).unwrap();
        assert_eq!(back.class_names, m.class_names);
        assert_eq!(back.entries(Split::Train).count(), 2);
        assert_eq!(back.entries(Split::Test).count(), 1);
        let (v, l) = super::super::read_volume(back.resolve(&back.volumes[2])).unwrap();
        let gen = cfg.generate().unwrap();
        assert_eq!(v.data(), gen.volumes[2].0.data());
        assert_eq!(l.unwrap().labels(), gen.volumes[2].1.labels());
    }
}
