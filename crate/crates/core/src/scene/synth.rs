use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{BevBox, ClassId, ClassTaxonomy, GridGeometry, MapRegion};
use crate::error::{Error, Result};
use crate::numerics::{derive_seed, Array, Mask};

/// Footprint prior (in cells) and height (in voxels) of one foreground class.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectShape {
    pub size_cells: [f64; 2],
    pub height: usize,
}

/// Which background classes play the layout roles of the scene generator.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroundRoles {
    pub road: ClassId,
    pub sidewalk: ClassId,
    pub structure: ClassId,
    pub vegetation: ClassId,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayoutConfig {
    pub roles: GroundRoles,
    /// Inclusive range of road band widths, in cells.
    pub road_width: [usize; 2],
    pub sidewalk_width: usize,
    /// Inclusive range of building count.
    pub buildings: [usize; 2],
    /// Inclusive range of tree count.
    pub trees: [usize; 2],
    /// Inclusive side-length range of the parking rectangle, in cells.
    pub carpark_side: [usize; 2],
}

impl LayoutConfig {
    fn desk() -> Self {
        Self {
            roles: GroundRoles {
                road: ClassId(5),
                sidewalk: ClassId(6),
                structure: ClassId(7),
                vegetation: ClassId(8),
            },
            road_width: [6, 10],
            sidewalk_width: 2,
            buildings: [1, 3],
            trees: [2, 5],
            carpark_side: [4, 8],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneConfig {
    pub taxonomy: ClassTaxonomy,
    pub geometry: GridGeometry,
    /// Feature width `C`.
    pub channels: usize,
    /// Inclusive range of object count per scene.
    pub box_count: [usize; 2],
    /// One shape prior per foreground class, in foreground order.
    pub object_shapes: Vec<ObjectShape>,
    pub layout: LayoutConfig,
    /// Explicit signatures, row 0 for free space then one per class `1..=K`.
    /// When absent they are drawn from `signature_seed`.
    #[serde(default)]
    pub signatures: Option<Vec<Vec<f64>>>,
    pub signature_seed: u64,
    pub signature_scale: f64,
    pub noise_sigma: f64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            taxonomy: ClassTaxonomy::desk(),
            geometry: GridGeometry::default(),
            channels: 16,
            box_count: [2, 6],
            object_shapes: vec![
                ObjectShape { size_cells: [4.0, 2.0], height: 2 },
                ObjectShape { size_cells: [6.0, 3.0], height: 3 },
                ObjectShape { size_cells: [2.0, 2.0], height: 2 },
                ObjectShape { size_cells: [3.0, 2.0], height: 1 },
            ],
            layout: LayoutConfig::desk(),
            signatures: None,
            signature_seed: 7,
            signature_scale: 1.0,
            noise_sigma: 1.0,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        self.taxonomy.validate()?;
        self.geometry.validate()?;
        if self.channels < 4 {
            return Err(Error::Config(format!(
                "feature width must be at least 4, got {}",
                self.channels
            )));
        }
        if self.box_count[0] > self.box_count[1] {
            return Err(Error::Config("box_count range is inverted".into()));
        }
        if self.object_shapes.len() != self.taxonomy.n_fg() {
            return Err(Error::Config(format!(
                "{} object shapes for {} foreground classes",
                self.object_shapes.len(),
                self.taxonomy.n_fg()
            )));
        }
        if self
            .object_shapes
            .iter()
            .any(|s| s.size_cells.iter().any(|&d| d < 2.0) || s.height == 0)
        {
            return Err(Error::Config(
                "object footprints must be at least 2 cells per side and height ≥ 1".into(),
            ));
        }
        let r = &self.layout.roles;
        for c in [r.road, r.sidewalk, r.structure, r.vegetation] {
            if !self.taxonomy.background.contains(&c) {
                return Err(Error::Config(format!("layout role uses non-background class {c}")));
            }
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::Config("noise sigma must be finite and ≥ 0".into()));
        }
        self.resolved_signatures().map(|_| ())
    }

    /// Class signatures, row 0 for free space, rows `1..=K` for classes.
    pub fn resolved_signatures(&self) -> Result<Vec<Vec<f64>>> {
        let rows = self.taxonomy.k() + 1;
        let sigs = match &self.signatures {
            Some(s) => s.clone(),
            None => {
                let mut rng = ChaCha8Rng::seed_from_u64(self.signature_seed);
                (0..rows)
                    .map(|_| {
                        (0..self.channels)
                            .map(|_| self.signature_scale * rng.sample::<f64, _>(StandardNormal))
                            .collect()
                    })
                    .collect()
            }
        };
        if sigs.len() != rows || sigs.iter().any(|s| s.len() != self.channels) {
            return Err(Error::Config(format!(
                "need {rows} signatures of width {}",
                self.channels
            )));
        }
        for a in 0..rows {
            for b in a + 1..rows {
                let d: f64 = sigs[a].iter().zip(&sigs[b]).map(|(x, y)| (x - y).powi(2)).sum();
                if d.sqrt() < 1e-9 {
                    return Err(Error::Config(format!("signatures {a} and {b} coincide")));
                }
            }
        }
        Ok(sigs)
    }
}

/// Voxel features shared by every task, `C×X×Y×Z`.
#[derive(Clone, Debug, PartialEq)]
pub struct SharedVoxelFeatures {
    pub features: Array,
}

impl SharedVoxelFeatures {
    pub fn channels(&self) -> usize {
        self.features.shape()[0]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneBox {
    #[serde(flatten)]
    pub bev: BevBox,
    /// Occupied voxel layers `[start, end)`.
    pub z_range: [usize; 2],
}

#[derive(Clone, Debug, PartialEq)]
pub struct GroundTruthScene {
    pub seed: u64,
    pub geometry: GridGeometry,
    /// `X×Y×Z` labels, row-major.
    pub voxel_labels: Vec<ClassId>,
    /// One `X×Y` mask per map class.
    pub map_masks: Vec<Mask>,
    pub boxes: Vec<SceneBox>,
    /// Pairs `(earlier, later)` of boxes of different classes that claimed the
    /// same voxel; the later box keeps it.
    pub overlaps: Vec<(usize, usize)>,
}

impl GroundTruthScene {
    pub fn label(&self, i: usize, j: usize, l: usize) -> ClassId {
        self.voxel_labels[self.geometry.voxel_index(i, j, l)]
    }

    pub fn bev_boxes(&self) -> Vec<BevBox> {
        self.boxes.iter().map(|b| b.bev).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Det,
    Map,
    Occ,
}

impl Task {
    pub const ALL: [Task; 3] = [Task::Det, Task::Map, Task::Occ];

    pub fn is_bev(self) -> bool {
        matches!(self, Task::Det | Task::Map)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Task::Det => "det",
            Task::Map => "map",
            Task::Occ => "occ",
        }
    }
}

impl std::str::FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "det" => Ok(Task::Det),
            "map" => Ok(Task::Map),
            "occ" => Ok(Task::Occ),
            other => Err(Error::contract(format!("unknown task tag `{other}`"))),
        }
    }
}

/// Supervision region for a task's suppression scores.
#[derive(Clone, Debug, PartialEq)]
pub struct RoIMask {
    pub task: Task,
    pub mask: Mask,
}

struct Layout {
    ground: Vec<ClassId>,
    carpark: Vec<bool>,
}

fn range(rng: &mut ChaCha8Rng, r: [usize; 2]) -> usize {
    rng.random_range(r[0]..=r[1])
}

fn build_layout(cfg: &SceneConfig, rng: &mut ChaCha8Rng) -> Layout {
    let g = &cfg.geometry;
    let roles = cfg.layout.roles;
    let (nx, ny) = (g.x, g.y);
    let mut ground = vec![roles.vegetation; nx * ny];

    // One or two road bands, each spanning the grid along one axis.
    let bands = rng.random_range(1..=2);
    let first_axis = rng.random_range(0..2usize);
    for b in 0..bands {
        let axis = (first_axis + b) % 2;
        let extent = if axis == 0 { ny } else { nx };
        let w = range(rng, cfg.layout.road_width).min(extent);
        let start = rng.random_range(0..=extent - w);
        for i in 0..nx {
            for j in 0..ny {
                let across = if axis == 0 { j } else { i };
                if (start..start + w).contains(&across) {
                    ground[g.bev_index(i, j)] = roles.road;
                }
            }
        }
    }

    // Sidewalk rims around the road.
    let sw = cfg.layout.sidewalk_width as isize;
    let is_road: Vec<bool> = ground.iter().map(|&c| c == roles.road).collect();
    for i in 0..nx {
        for j in 0..ny {
            if is_road[g.bev_index(i, j)] {
                continue;
            }
            let near = (-sw..=sw).any(|di| {
                (-sw..=sw).any(|dj| {
                    let (a, b) = (i as isize + di, j as isize + dj);
                    a >= 0
                        && b >= 0
                        && (a as usize) < nx
                        && (b as usize) < ny
                        && is_road[g.bev_index(a as usize, b as usize)]
                })
            });
            if near {
                ground[g.bev_index(i, j)] = roles.sidewalk;
            }
        }
    }

    // Parking rectangle: a box of road cells around a random road cell.
    let mut carpark = vec![false; nx * ny];
    let road_cells: Vec<usize> = (0..nx * ny).filter(|&c| is_road[c]).collect();
    if !road_cells.is_empty() {
        let anchor = road_cells[rng.random_range(0..road_cells.len())];
        let (ai, aj) = (anchor / ny, anchor % ny);
        let wi = range(rng, cfg.layout.carpark_side);
        let wj = range(rng, cfg.layout.carpark_side);
        for i in ai..(ai + wi).min(nx) {
            for j in aj..(aj + wj).min(ny) {
                let c = g.bev_index(i, j);
                carpark[c] = is_road[c];
            }
        }
    }
    Layout { ground, carpark }
}

/// Generates one synthetic scene: ground-truth labels, map layers and boxes,
/// and voxel features equal to each label's signature plus Gaussian noise.
pub fn synthesize_scene(
    cfg: &SceneConfig,
    seed: u64,
) -> Result<(SharedVoxelFeatures, GroundTruthScene)> {
    cfg.validate()?;
    let sigs = cfg.resolved_signatures()?;
    let g = cfg.geometry;
    let tax = &cfg.taxonomy;
    let roles = cfg.layout.roles;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "layout"));

    let layout = build_layout(cfg, &mut rng);
    let mut labels = vec![ClassId::FREE; g.voxels()];
    for i in 0..g.x {
        for j in 0..g.y {
            labels[g.voxel_index(i, j, 0)] = layout.ground[g.bev_index(i, j)];
        }
    }

    // Buildings stand on vegetation ground and rise from the ground layer.
    let n_buildings = range(&mut rng, cfg.layout.buildings);
    for _ in 0..n_buildings {
        let w = rng.random_range(2..=5usize.min(g.x));
        let l = rng.random_range(2..=5usize.min(g.y));
        let i0 = rng.random_range(0..=g.x - w);
        let j0 = rng.random_range(0..=g.y - l);
        let h = rng.random_range(2..=g.z);
        for i in i0..i0 + w {
            for j in j0..j0 + l {
                if layout.ground[g.bev_index(i, j)] != roles.vegetation {
                    continue;
                }
                for z in 0..h {
                    labels[g.voxel_index(i, j, z)] = roles.structure;
                }
            }
        }
    }
    let mut ground: Vec<ClassId> = (0..g.bev_cells())
        .map(|c| labels[c * g.z])
        .collect();

    // Tree crowns above vegetation ground.
    let n_trees = range(&mut rng, cfg.layout.trees);
    for _ in 0..n_trees {
        let i0 = rng.random_range(0..g.x);
        let j0 = rng.random_range(0..g.y);
        let side = rng.random_range(1..=2usize);
        for i in i0..(i0 + side).min(g.x) {
            for j in j0..(j0 + side).min(g.y) {
                if ground[g.bev_index(i, j)] != roles.vegetation {
                    continue;
                }
                for z in 1..g.z.min(3) {
                    labels[g.voxel_index(i, j, z)] = roles.vegetation;
                }
            }
        }
    }

    // Objects, preferring road cells for their centers.
    let n_boxes = range(&mut rng, cfg.box_count);
    let road_cells: Vec<usize> = (0..g.bev_cells()).filter(|&c| ground[c] == roles.road).collect();
    let mut owner: Vec<Option<usize>> = vec![None; g.voxels()];
    let mut boxes = Vec::with_capacity(n_boxes);
    let mut overlaps = Vec::new();
    for b in 0..n_boxes {
        let fg_idx = rng.random_range(0..tax.n_fg());
        let class = tax.foreground[fg_idx];
        let shape = cfg.object_shapes[fg_idx];
        let size = shape
            .size_cells
            .map(|s| (s * rng.random_range(0.8..1.2)).max(2.0) * g.cell_size);
        let yaw = std::f64::consts::PI - rng.random_range(0.0..std::f64::consts::TAU);
        let cell = if road_cells.is_empty() {
            rng.random_range(0..g.bev_cells())
        } else {
            road_cells[rng.random_range(0..road_cells.len())]
        };
        let [cx, cy] = g.cell_center(cell / g.y, cell % g.y);
        let center = [
            cx + rng.random_range(-0.5..0.5) * g.cell_size,
            cy + rng.random_range(-0.5..0.5) * g.cell_size,
        ];
        let bev = BevBox { class, center, size, yaw };
        let z_range = [1.min(g.z - 1), (1 + shape.height).min(g.z)];
        for c in bev.footprint(&g) {
            for z in z_range[0]..z_range[1] {
                let v = c * g.z + z;
                if let Some(prev) = owner[v] {
                    if boxes.get(prev).map(|p: &SceneBox| p.bev.class) != Some(class)
                        && !overlaps.contains(&(prev, b))
                    {
                        overlaps.push((prev, b));
                    }
                }
                owner[v] = Some(b);
                labels[v] = class;
            }
        }
        boxes.push(SceneBox { bev, z_range });
    }
    ground = (0..g.bev_cells()).map(|c| labels[c * g.z]).collect();

    let map_masks = tax
        .map_classes
        .iter()
        .map(|m| {
            Mask::from_fn(&g.bev_shape(), |c| {
                ground[c] == m.source
                    && match m.region {
                        MapRegion::Whole => true,
                        MapRegion::Carpark => layout.carpark[c],
                    }
            })
        })
        .collect();

    let mut noise = ChaCha8Rng::seed_from_u64(derive_seed(seed, "noise"));
    let c = cfg.channels;
    let nv = g.voxels();
    let mut feats = vec![0.0; c * nv];
    for (v, &label) in labels.iter().enumerate() {
        let sig = &sigs[label.0 as usize];
        for ch in 0..c {
            let n = if cfg.noise_sigma > 0.0 {
                cfg.noise_sigma * noise.sample::<f64, _>(StandardNormal)
            } else {
                0.0
            };
            feats[ch * nv + v] = sig[ch] + n;
        }
    }
    let features = Array::new(vec![c, g.x, g.y, g.z], feats)?;

    Ok((
        SharedVoxelFeatures { features },
        GroundTruthScene {
            seed,
            geometry: g,
            voxel_labels: labels,
            map_masks,
            boxes,
            overlaps,
        },
    ))
}

/// RoI mask supervising a task's suppression scores: box footprints for
/// detection, the union of map layers for map segmentation, occupied voxels
/// for occupancy.
pub fn derive_roi_mask(gt: &GroundTruthScene, task: Task) -> RoIMask {
    let g = &gt.geometry;
    let mask = match task {
        Task::Det => {
            let mut m = Mask::empty(&g.bev_shape());
            for b in &gt.boxes {
                for c in b.bev.footprint(g) {
                    m.bits_mut()[c] = true;
                }
            }
            m
        }
        Task::Map => {
            let mut m = Mask::empty(&g.bev_shape());
            for layer in &gt.map_masks {
                m.or_assign(layer);
            }
            m
        }
        Task::Occ => Mask::from_fn(&g.voxel_shape(), |v| !gt.voxel_labels[v].is_free()),
    };
    RoIMask { task, mask }
}

/// Labels each voxel with the class whose signature is nearest to its feature
/// vector (row 0 of `signatures` is free space).
pub fn nearest_signature_labels(features: &SharedVoxelFeatures, signatures: &[Vec<f64>]) -> Vec<ClassId> {
    let f = &features.features;
    let c = f.shape()[0];
    let nv = f.len() / c;
    (0..nv)
        .map(|v| {
            let mut best = (f64::INFINITY, 0);
            for (k, sig) in signatures.iter().enumerate() {
                let d: f64 = (0..c).map(|ch| (f.data()[ch * nv + v] - sig[ch]).powi(2)).sum();
                if d < best.0 {
                    best = (d, k);
                }
            }
            ClassId(best.1 as u16)
        })
        .collect()
}
