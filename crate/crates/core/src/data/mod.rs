//! Synthetic indoor scenes with ground truth, augmentation, and on-disk formats.

mod augment;
mod io;
mod scene;

pub use augment::{augment, AugmentParams, MAX_ROTATION, SCALE_RANGE};
pub use io::{
    decode_point_cloud, encode_point_cloud, read_annotations, read_manifest, read_point_cloud,
    write_annotations, write_manifest, write_point_cloud, AnnotationRecord, ManifestEntry,
    POINT_CLOUD_MAGIC,
};
pub use scene::{
    generate_dataset, generate_scene, scene_seed, ClassSpec, Face, Scene, SyntheticSceneSpec,
};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Ordered class names; a label is an index into this list.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassVocab(pub Vec<String>);

impl ClassVocab {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn index(&self, name: &str) -> Result<usize> {
        self.0.iter().position(|n| n == name).ok_or_else(|| {
            Error::Input(format!(
                "unknown class label `{name}` (known: {})",
                self.0.join(", ")
            ))
        })
    }

    pub fn name(&self, idx: usize) -> Result<&str> {
        self.0
            .get(idx)
            .map(String::as_str)
            .ok_or_else(|| Error::Index(format!("class {idx} of {}", self.0.len())))
    }
}
