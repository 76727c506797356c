use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Semantic class id. Real classes are `1..=K`; [`ClassId::FREE`] marks an
/// unoccupied voxel.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ClassId(pub u16);

impl ClassId {
    pub const FREE: ClassId = ClassId(0);

    pub fn is_free(self) -> bool {
        self == Self::FREE
    }
}

impl fmt::Display for ClassId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Which part of a ground class a map layer covers.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MapRegion {
    /// Every ground cell of the source class.
    Whole,
    /// Only the parking rectangle carved out of the source class.
    Carpark,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MapClass {
    pub name: String,
    /// Background class whose ground cells this layer is drawn from.
    pub source: ClassId,
    pub region: MapRegion,
}

/// Semantic classes split into foreground (objects) and background (stuff),
/// plus the BEV map layers derived from background classes.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassTaxonomy {
    /// Names of classes `1..=K`, in id order.
    pub names: Vec<String>,
    pub foreground: Vec<ClassId>,
    pub background: Vec<ClassId>,
    pub map_classes: Vec<MapClass>,
}

impl ClassTaxonomy {
    /// Eight classes: four objects and four kinds of stuff, with four map
    /// layers (two of which come from the drivable surface).
    pub fn desk() -> Self {
        let names = [
            "car",
            "truck",
            "pedestrian",
            "bicycle",
            "drivable_surface",
            "sidewalk",
            "manmade",
            "vegetation",
        ];
        Self {
            names: names.iter().map(|s| s.to_string()).collect(),
            foreground: (1..=4).map(ClassId).collect(),
            background: (5..=8).map(ClassId).collect(),
            map_classes: vec![
                map_class("drivable_area", 5, MapRegion::Whole),
                map_class("carpark_area", 5, MapRegion::Carpark),
                map_class("walkway", 6, MapRegion::Whole),
                map_class("terrain", 8, MapRegion::Whole),
            ],
        }
    }

    /// Seventeen classes in the layout of common driving occupancy benchmarks,
    /// with six map layers.
    pub fn full_scale() -> Self {
        let names = [
            "barrier",
            "bicycle",
            "bus",
            "car",
            "construction_vehicle",
            "motorcycle",
            "pedestrian",
            "traffic_cone",
            "trailer",
            "truck",
            "driveable_surface",
            "other_flat",
            "sidewalk",
            "terrain",
            "manmade",
            "vegetation",
            "others",
        ];
        Self {
            names: names.iter().map(|s| s.to_string()).collect(),
            foreground: (1..=10).map(ClassId).collect(),
            background: (11..=17).map(ClassId).collect(),
            map_classes: vec![
                map_class("drivable_area", 11, MapRegion::Whole),
                map_class("ped_crossing", 11, MapRegion::Carpark),
                map_class("walkway", 13, MapRegion::Whole),
                map_class("stop_line", 11, MapRegion::Carpark),
                map_class("carpark_area", 11, MapRegion::Carpark),
                map_class("divider", 12, MapRegion::Whole),
            ],
        }
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.names.len();
        if k == 0 || k > u16::MAX as usize {
            return Err(Error::Config(format!("class count {k} out of range")));
        }
        if self.foreground.is_empty() || self.background.is_empty() {
            return Err(Error::Config(
                "foreground and background groups must both be nonempty".into(),
            ));
        }
        let fg: BTreeSet<_> = self.foreground.iter().collect();
        let bg: BTreeSet<_> = self.background.iter().collect();
        if fg.len() != self.foreground.len() || bg.len() != self.background.len() {
            return Err(Error::Config("duplicate class id in a group".into()));
        }
        if fg.intersection(&bg).next().is_some() {
            return Err(Error::Config("foreground and background overlap".into()));
        }
        let all: BTreeSet<_> = fg.union(&bg).map(|c| c.0 as usize).collect();
        if all != (1..=k).collect() {
            return Err(Error::Config(format!(
                "foreground ∪ background must be exactly 1..={k}"
            )));
        }
        if self.map_classes.is_empty() {
            return Err(Error::Config("at least one map class is required".into()));
        }
        for m in &self.map_classes {
            if !self.background.contains(&m.source) {
                return Err(Error::Config(format!(
                    "map class `{}` draws from non-background class {}",
                    m.name, m.source
                )));
            }
        }
        Ok(())
    }

    /// Total semantic class count `K`.
    pub fn k(&self) -> usize {
        self.names.len()
    }

    pub fn n_fg(&self) -> usize {
        self.foreground.len()
    }

    pub fn n_bg(&self) -> usize {
        self.background.len()
    }

    /// Detection classes are the foreground classes.
    pub fn n_det(&self) -> usize {
        self.foreground.len()
    }

    pub fn n_map(&self) -> usize {
        self.map_classes.len()
    }

    pub fn name(&self, c: ClassId) -> &str {
        if c.is_free() {
            "free"
        } else {
            &self.names[c.0 as usize - 1]
        }
    }

    pub fn all_classes(&self) -> impl Iterator<Item = ClassId> {
        (1..=self.k() as u16).map(ClassId)
    }

    /// Occupancy class order: foreground members then background members.
    pub fn occ_order(&self) -> Vec<ClassId> {
        self.foreground
            .iter()
            .chain(&self.background)
            .copied()
            .collect()
    }

    /// Position of a label on the occupancy class axis; free maps to `K`.
    pub fn occ_channel(&self, c: ClassId) -> usize {
        if c.is_free() {
            return self.k();
        }
        self.foreground
            .iter()
            .position(|&f| f == c)
            .or_else(|| self.background.iter().position(|&b| b == c).map(|i| i + self.n_fg()))
            .expect("label outside taxonomy")
    }

    /// Index of a foreground class among detection classes.
    pub fn det_index(&self, c: ClassId) -> Option<usize> {
        self.foreground.iter().position(|&f| f == c)
    }

    pub fn is_foreground(&self, c: ClassId) -> bool {
        self.foreground.contains(&c)
    }
}

fn map_class(name: &str, source: u16, region: MapRegion) -> MapClass {
    MapClass {
        name: name.into(),
        source: ClassId(source),
        region,
    }
}
