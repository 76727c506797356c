use serde::{Deserialize, Serialize};

use super::ClassId;
use crate::error::{Error, Result};

/// Regular voxel lattice. Cell `(i, j, l)` spans
/// `origin + [i, i+1) × [j, j+1) × [l, l+1)` cell sizes.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridGeometry {
    pub x: usize,
    pub y: usize,
    pub z: usize,
    pub cell_size: f64,
    pub origin: [f64; 3],
}

impl Default for GridGeometry {
    fn default() -> Self {
        Self {
            x: 32,
            y: 32,
            z: 4,
            cell_size: 0.5,
            origin: [0.0, 0.0, 0.0],
        }
    }
}

impl GridGeometry {
    pub fn validate(&self) -> Result<()> {
        if self.x < 2 || self.y < 2 || self.z < 2 {
            return Err(Error::Config(format!(
                "grid extents must be at least 2, got {}×{}×{}",
                self.x, self.y, self.z
            )));
        }
        if !(self.cell_size > 0.0 && self.cell_size.is_finite()) {
            return Err(Error::Config("cell_size must be positive".into()));
        }
        Ok(())
    }

    pub fn bev_cells(&self) -> usize {
        self.x * self.y
    }

    pub fn voxels(&self) -> usize {
        self.x * self.y * self.z
    }

    pub fn bev_shape(&self) -> [usize; 2] {
        [self.x, self.y]
    }

    pub fn voxel_shape(&self) -> [usize; 3] {
        [self.x, self.y, self.z]
    }

    pub fn bev_index(&self, i: usize, j: usize) -> usize {
        i * self.y + j
    }

    pub fn voxel_index(&self, i: usize, j: usize, l: usize) -> usize {
        (i * self.y + j) * self.z + l
    }

    /// World position of the center of BEV cell `(i, j)`.
    pub fn cell_center(&self, i: usize, j: usize) -> [f64; 2] {
        [
            self.origin[0] + (i as f64 + 0.5) * self.cell_size,
            self.origin[1] + (j as f64 + 0.5) * self.cell_size,
        ]
    }

    /// Continuous lattice coordinates of a world point, with integers at
    /// cell centers (used for bilinear sampling).
    pub fn to_lattice(&self, p: [f64; 2]) -> [f64; 2] {
        [
            (p[0] - self.origin[0]) / self.cell_size - 0.5,
            (p[1] - self.origin[1]) / self.cell_size - 0.5,
        ]
    }

    /// BEV cell containing a world point, if inside the grid.
    pub fn cell_of(&self, p: [f64; 2]) -> Option<(usize, usize)> {
        let u = ((p[0] - self.origin[0]) / self.cell_size).floor();
        let v = ((p[1] - self.origin[1]) / self.cell_size).floor();
        (u >= 0.0 && v >= 0.0 && (u as usize) < self.x && (v as usize) < self.y)
            .then_some((u as usize, v as usize))
    }
}

/// Oriented rectangle on the ground plane. `size[0]` is measured along the
/// heading direction `yaw`, `size[1]` across it.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BevBox {
    pub class: ClassId,
    pub center: [f64; 2],
    pub size: [f64; 2],
    pub yaw: f64,
}

impl BevBox {
    /// Box-frame coordinates of a world point.
    pub fn to_local(&self, p: [f64; 2]) -> [f64; 2] {
        let (s, c) = self.yaw.sin_cos();
        let dx = p[0] - self.center[0];
        let dy = p[1] - self.center[1];
        [c * dx + s * dy, -s * dx + c * dy]
    }

    pub fn to_world(&self, local: [f64; 2]) -> [f64; 2] {
        let (s, c) = self.yaw.sin_cos();
        [
            self.center[0] + c * local[0] - s * local[1],
            self.center[1] + s * local[0] + c * local[1],
        ]
    }

    /// Closed point-in-rectangle test.
    pub fn contains(&self, p: [f64; 2]) -> bool {
        const TOL: f64 = 1e-9;
        let [u, v] = self.to_local(p);
        u.abs() <= self.size[0] / 2.0 + TOL && v.abs() <= self.size[1] / 2.0 + TOL
    }

    /// BEV cells whose centers fall inside the rectangle, as flat indices.
    pub fn footprint(&self, g: &GridGeometry) -> Vec<usize> {
        let mut cells = Vec::new();
        for i in 0..g.x {
            for j in 0..g.y {
                if self.contains(g.cell_center(i, j)) {
                    cells.push(g.bev_index(i, j));
                }
            }
        }
        cells
    }
}
