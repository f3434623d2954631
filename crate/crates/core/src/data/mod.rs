//! Volumes, synthetic phantoms, preprocessing, augmentation and on-disk formats.

mod augment;
mod io;
mod manifest;
mod phantom;
mod preprocess;
mod synthetic;
mod volume;

pub use augment::{augment, crop, flip, rot90, zoom, AugmentConfig};
pub use io::{read_volume, read_volume_from, write_volume, write_volume_to, VOLUME_MAGIC};
pub use manifest::{DatasetManifest, ManifestEntry, Split};
pub use phantom::{generate_phantom, Adjacency, Ellipsoid, Organ, PhantomSpec};
pub use preprocess::znormalize;
pub use synthetic::{GeneratedDataset, SyntheticDataset};
pub use volume::{linear_index, Coord, LabelVolume, Volume};
