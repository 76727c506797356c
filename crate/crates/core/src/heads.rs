//! Task heads: a center-heatmap detector with box decoding, a per-class
//! sigmoid map segmenter, and an occupancy decoder that scores voxels against
//! scene prototypes used as queries.

use crate::error::{Error, Result};
use crate::numerics::{ConvLayer, ConvRank, Mlp};
use crate::numerics::{Array, ParamId, ParamStore, Tape, Var};
use crate::scene::{BevBox, ClassTaxonomy, GridGeometry};
use crate::spa::DecodedBox;

/// Regression channels: offset x, offset y (cells), log length, log width
/// (cells), sin yaw, cos yaw.
pub const REG_CHANNELS: usize = 6;

#[derive(Clone, Debug)]
pub struct DetectionHead {
    pub trunk: ConvLayer,
    pub heatmap: ConvLayer,
    pub regression: ConvLayer,
}

/// Heatmaps `[N_Det, X, Y]` after the sigmoid and raw regression `[6, X, Y]`.
#[derive(Clone, Copy, Debug)]
pub struct DetectionRaw {
    pub heatmaps: Var,
    pub regression: Var,
}

impl DetectionHead {
    pub fn new(store: &mut ParamStore, channels: usize, n_det: usize, seed: u64) -> Result<Self> {
        Ok(Self {
            trunk: ConvLayer::new(store, "head/det/trunk", ConvRank::Bev, channels, channels, 3, seed)?,
            heatmap: ConvLayer::new(store, "head/det/heatmap", ConvRank::Bev, channels, n_det, 1, seed)?,
            regression: ConvLayer::new(store, "head/det/regression", ConvRank::Bev, channels, REG_CHANNELS, 1, seed)?,
        })
    }

    pub fn detect(&self, tape: &mut Tape, store: &ParamStore, features: Var) -> Result<DetectionRaw> {
        let h = self.trunk.forward(tape, store, features)?;
        let h = tape.relu(h)?;
        let logits = self.heatmap.forward(tape, store, h)?;
        Ok(DetectionRaw {
            heatmaps: tape.sigmoid(logits)?,
            regression: self.regression.forward(tape, store, h)?,
        })
    }

    pub fn params(&self) -> Vec<ParamId> {
        [&self.trunk, &self.heatmap, &self.regression]
            .iter()
            .flat_map(|l| l.params())
            .collect()
    }
}

/// Exact regression targets for a box whose center lies in cell `(i, j)`.
pub fn encode_box(g: &GridGeometry, b: &BevBox) -> Option<((usize, usize), [f64; REG_CHANNELS])> {
    let (i, j) = g.cell_of(b.center)?;
    let cc = g.cell_center(i, j);
    Some((
        (i, j),
        [
            (b.center[0] - cc[0]) / g.cell_size,
            (b.center[1] - cc[1]) / g.cell_size,
            (b.size[0] / g.cell_size).ln(),
            (b.size[1] / g.cell_size).ln(),
            b.yaw.sin(),
            b.yaw.cos(),
        ],
    ))
}

/// Peak decoding. A cell emits a box for a class when its heatmap value is
/// at least `threshold` and beats every 3×3 neighbor, where an equal neighbor
/// only loses if it comes later in `(x, y)` order.
pub fn decode_boxes(
    heatmaps: &Array,
    regression: &Array,
    g: &GridGeometry,
    taxonomy: &ClassTaxonomy,
    threshold: f64,
) -> Result<Vec<DecodedBox>> {
    let n = taxonomy.n_det();
    if heatmaps.shape() != [n, g.x, g.y] {
        return Err(Error::shape("decode_boxes", heatmaps.shape(), &[n, g.x, g.y]));
    }
    if regression.shape() != [REG_CHANNELS, g.x, g.y] {
        return Err(Error::shape("decode_boxes", regression.shape(), &[REG_CHANNELS, g.x, g.y]));
    }
    let cells = g.bev_cells();
    let h = heatmaps.data();
    let r = |ch: usize, cell: usize| regression.data()[ch * cells + cell];
    let mut out = Vec::new();
    for k in 0..n {
        let hk = &h[k * cells..(k + 1) * cells];
        for i in 0..g.x {
            for j in 0..g.y {
                let v = hk[g.bev_index(i, j)];
                if v < threshold || !is_peak(hk, g, i, j) {
                    continue;
                }
                let cell = g.bev_index(i, j);
                let cc = g.cell_center(i, j);
                out.push(DecodedBox {
                    bev: BevBox {
                        class: taxonomy.foreground[k],
                        center: [
                            cc[0] + r(0, cell) * g.cell_size,
                            cc[1] + r(1, cell) * g.cell_size,
                        ],
                        size: [r(2, cell).exp() * g.cell_size, r(3, cell).exp() * g.cell_size],
                        yaw: r(4, cell).atan2(r(5, cell)),
                    },
                    score: v,
                });
            }
        }
    }
    Ok(out)
}

fn is_peak(h: &[f64], g: &GridGeometry, i: usize, j: usize) -> bool {
    let v = h[g.bev_index(i, j)];
    for di in -1isize..=1 {
        for dj in -1isize..=1 {
            if di == 0 && dj == 0 {
                continue;
            }
            let (p, q) = (i as isize + di, j as isize + dj);
            if p < 0 || q < 0 || p >= g.x as isize || q >= g.y as isize {
                continue;
            }
            let w = h[g.bev_index(p as usize, q as usize)];
            if w > v || (w == v && (p, q) < (i as isize, j as isize)) {
                return false;
            }
        }
    }
    true
}

#[derive(Clone, Debug)]
pub struct MapHead {
    pub trunk: ConvLayer,
    pub out: ConvLayer,
}

impl MapHead {
    pub fn new(store: &mut ParamStore, channels: usize, n_map: usize, seed: u64) -> Result<Self> {
        Ok(Self {
            trunk: ConvLayer::new(store, "head/map/trunk", ConvRank::Bev, channels, channels, 3, seed)?,
            out: ConvLayer::new(store, "head/map/out", ConvRank::Bev, channels, n_map, 1, seed)?,
        })
    }

    /// Independent per-class probabilities `[N_Map, X, Y]`.
    pub fn segment(&self, tape: &mut Tape, store: &ParamStore, features: Var) -> Result<Var> {
        let h = self.trunk.forward(tape, store, features)?;
        let h = tape.relu(h)?;
        let logits = self.out.forward(tape, store, h)?;
        tape.sigmoid(logits)
    }

    pub fn params(&self) -> Vec<ParamId> {
        [&self.trunk, &self.out].iter().flat_map(|l| l.params()).collect()
    }
}

/// Logit of class `k` at voxel `v` is `⟨ψ(q_k), φ(F)(·, v)⟩`, where the
/// queries are the scene prototypes followed by a learnable free prototype.
#[derive(Clone, Debug)]
pub struct OccupancyDecoder {
    pub phi: ConvLayer,
    pub psi: Mlp,
    pub free: ParamId,
}

impl OccupancyDecoder {
    pub fn new(store: &mut ParamStore, channels: usize, seed: u64) -> Result<Self> {
        Ok(Self {
            phi: ConvLayer::new(store, "head/occ/phi", ConvRank::Voxel, channels, channels, 1, seed)?,
            psi: Mlp::new(store, "head/occ/psi", channels, channels, channels, seed)?,
            free: store.add_uniform("head/occ/free", &[1, channels], channels, seed)?,
        })
    }

    /// Logits `[K+1, X, Y, Z]` from features `[C, X, Y, Z]` and prototypes `[K, C]`.
    pub fn predict(&self, tape: &mut Tape, store: &ParamStore, features: Var, prototypes: Var) -> Result<Var> {
        let shape = tape.shape(features).to_vec();
        let c = shape[0];
        if tape.shape(prototypes).len() != 2 || tape.shape(prototypes)[1] != c {
            return Err(Error::shape("predict_occupancy", &shape, tape.shape(prototypes)));
        }
        let free = tape.param(store, self.free);
        let queries = tape.concat(&[prototypes, free])?;
        let queries = self.psi.forward(tape, store, queries)?;
        let embedded = self.phi.forward(tape, store, features)?;
        let s = shape[1..].iter().product::<usize>();
        let flat = tape.reshape(embedded, &[c, s])?;
        let logits = tape.matmul(queries, flat)?;
        let mut out = shape;
        out[0] = tape.shape(queries)[0];
        tape.reshape(logits, &out)
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut ids = self.phi.params().to_vec();
        for l in [&self.psi.hidden, &self.psi.out] {
            ids.extend([l.weight, l.bias]);
        }
        ids.push(self.free);
        ids
    }
}
