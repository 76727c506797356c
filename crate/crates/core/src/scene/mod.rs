//! Class taxonomy, grid geometry and the synthetic scene generator that
//! stands in for an image backbone: it produces shared voxel features that
//! are correlated with known ground truth.

mod dump;
mod geometry;
mod synth;
mod taxonomy;

pub use dump::{SceneDump, SCENE_FORMAT, SCENE_VERSION};
pub use geometry::{BevBox, GridGeometry};
pub use synth::{
    derive_roi_mask, nearest_signature_labels, synthesize_scene, GroundRoles, GroundTruthScene,
    LayoutConfig, ObjectShape, RoIMask, SceneBox, SceneConfig, SharedVoxelFeatures, Task,
};
pub use taxonomy::{ClassId, ClassTaxonomy, MapClass, MapRegion};
