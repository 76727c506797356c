//! JSON scene dump: labels, map layers, boxes and the generating seed.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ClassId, GridGeometry, GroundTruthScene, SceneBox, SharedVoxelFeatures};
use crate::error::{Error, Result};
use crate::numerics::{Array, Mask};

pub const SCENE_FORMAT: &str = "maestro-scene";
pub const SCENE_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneDump {
    pub format: String,
    pub version: u32,
    pub seed: u64,
    pub geometry: GridGeometry,
    pub class_names: Vec<String>,
    pub free_label: ClassId,
    pub map_class_names: Vec<String>,
    /// Row-major `X×Y×Z` labels.
    pub voxel_labels: Vec<ClassId>,
    /// One row-major `X×Y` 0/1 grid per map class.
    pub map_masks: Vec<Vec<u8>>,
    pub boxes: Vec<SceneBox>,
    pub overlaps: Vec<(usize, usize)>,
    /// Row-major `C×X×Y×Z` features, when requested.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub features: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub channels: Option<usize>,
}

impl SceneDump {
    pub fn new(
        gt: &GroundTruthScene,
        class_names: &[String],
        map_class_names: &[String],
        features: Option<&SharedVoxelFeatures>,
    ) -> Self {
        Self {
            format: SCENE_FORMAT.into(),
            version: SCENE_VERSION,
            seed: gt.seed,
            geometry: gt.geometry,
            class_names: class_names.to_vec(),
            free_label: ClassId::FREE,
            map_class_names: map_class_names.to_vec(),
            voxel_labels: gt.voxel_labels.clone(),
            map_masks: gt
                .map_masks
                .iter()
                .map(|m| m.bits().iter().map(|&b| b as u8).collect())
                .collect(),
            boxes: gt.boxes.clone(),
            overlaps: gt.overlaps.clone(),
            features: features.map(|f| f.features.data().to_vec()),
            channels: features.map(|f| f.channels()),
        }
    }

    pub fn ground_truth(&self) -> Result<GroundTruthScene> {
        if self.format != SCENE_FORMAT || self.version != SCENE_VERSION {
            return Err(Error::contract(format!(
                "unsupported scene dump {} v{}",
                self.format, self.version
            )));
        }
        let g = self.geometry;
        if self.voxel_labels.len() != g.voxels() {
            return Err(Error::shape("scene dump labels", &g.voxel_shape(), &[self.voxel_labels.len()]));
        }
        let map_masks = self
            .map_masks
            .iter()
            .map(|m| Mask::new(g.bev_shape().to_vec(), m.iter().map(|&b| b != 0).collect()))
            .collect::<Result<Vec<_>>>()?;
        Ok(GroundTruthScene {
            seed: self.seed,
            geometry: g,
            voxel_labels: self.voxel_labels.clone(),
            map_masks,
            boxes: self.boxes.clone(),
            overlaps: self.overlaps.clone(),
        })
    }

    pub fn shared_features(&self) -> Result<Option<SharedVoxelFeatures>> {
        match (&self.features, self.channels) {
            (Some(f), Some(c)) => {
                let g = self.geometry;
                Ok(Some(SharedVoxelFeatures {
                    features: Array::new(vec![c, g.x, g.y, g.z], f.clone())?,
                }))
            }
            _ => Ok(None),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }
}
