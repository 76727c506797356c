//! Scene prototype aggregation. Detection prototypes come from bilinear
//! RoIAlign over predicted boxes, map prototypes from masked means under
//! predicted masks; both are folded into the occupancy group through a
//! class correspondence table.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Array, Tape, Taps, Var};
use crate::scene::{BevBox, ClassId, ClassTaxonomy, GridGeometry};

/// Bilinear taps for a point in lattice coordinates (integers at cell
/// centers) on an `x × y` grid. Corners outside the grid read as zero.
pub fn bilinear_taps(g: &GridGeometry, lattice: [f64; 2]) -> Vec<(usize, f64)> {
    let (u, v) = (lattice[0], lattice[1]);
    let (u0, v0) = (u.floor(), v.floor());
    let (fu, fv) = (u - u0, v - v0);
    let mut taps = Vec::with_capacity(4);
    for (du, wu) in [(0.0, 1.0 - fu), (1.0, fu)] {
        for (dv, wv) in [(0.0, 1.0 - fv), (1.0, fv)] {
            let (i, j) = (u0 + du, v0 + dv);
            let w = wu * wv;
            if w != 0.0 && i >= 0.0 && j >= 0.0 && (i as usize) < g.x && (j as usize) < g.y {
                taps.push((g.bev_index(i as usize, j as usize), w));
            }
        }
    }
    taps
}

/// World positions of an `out_h × out_w` lattice of bin centers inside a box,
/// row-major with rows along the heading.
pub fn roi_lattice(bx: &BevBox, out_h: usize, out_w: usize) -> Vec<[f64; 2]> {
    let mut pts = Vec::with_capacity(out_h * out_w);
    for a in 0..out_h {
        for b in 0..out_w {
            let u = ((a as f64 + 0.5) / out_h as f64 - 0.5) * bx.size[0];
            let v = ((b as f64 + 0.5) / out_w as f64 - 0.5) * bx.size[1];
            pts.push(bx.to_world([u, v]));
        }
    }
    pts
}

fn roi_taps(g: &GridGeometry, bx: &BevBox, out_h: usize, out_w: usize) -> Result<Taps> {
    if !(bx.size[0] > 0.0 && bx.size[1] > 0.0) || out_h == 0 || out_w == 0 {
        return Err(Error::contract("RoIAlign needs a positive box and lattice"));
    }
    Ok(roi_lattice(bx, out_h, out_w)
        .into_iter()
        .map(|p| bilinear_taps(g, g.to_lattice(p)))
        .collect())
}

/// Bilinear RoIAlign of a BEV feature map `[C, X, Y]` into `[C, out_h, out_w]`.
pub fn roi_align_bev(
    tape: &mut Tape,
    features: Var,
    g: &GridGeometry,
    bx: &BevBox,
    out_h: usize,
    out_w: usize,
) -> Result<Var> {
    let c = check_bev(tape, features, g, "roi_align_bev")?;
    let taps = roi_taps(g, bx, out_h, out_w)?;
    let flat = tape.reshape(features, &[c, g.bev_cells()])?;
    let out = tape.gather(flat, taps)?;
    tape.reshape(out, &[c, out_h, out_w])
}

fn check_bev(tape: &Tape, features: Var, g: &GridGeometry, op: &'static str) -> Result<usize> {
    let s = tape.shape(features);
    if s.len() != 3 || s[1] != g.x || s[2] != g.y {
        return Err(Error::shape(op, s, &g.bev_shape()));
    }
    Ok(s[0])
}

/// Scored box predicted by the detection head.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecodedBox {
    #[serde(flatten)]
    pub bev: BevBox,
    pub score: f64,
}

/// Per detection class: the mean over all lattice samples of all of that
/// class's boxes, `[N_Det, C]`. Classes without boxes give zero rows.
pub fn detection_prototypes(
    tape: &mut Tape,
    features: Var,
    g: &GridGeometry,
    taxonomy: &ClassTaxonomy,
    boxes: &[DecodedBox],
    lattice: usize,
) -> Result<Var> {
    let c = check_bev(tape, features, g, "detection_prototypes")?;
    let mut taps: Taps = vec![Vec::new(); taxonomy.n_det()];
    let mut counts = vec![0usize; taxonomy.n_det()];
    for b in boxes {
        let k = taxonomy
            .det_index(b.bev.class)
            .ok_or_else(|| Error::contract(format!("box class {} is not a detection class", b.bev.class.0)))?;
        counts[k] += 1;
    }
    for b in boxes {
        let k = taxonomy.det_index(b.bev.class).unwrap_or_default();
        let w = 1.0 / (counts[k] * lattice * lattice) as f64;
        for sample in roi_taps(g, &b.bev, lattice, lattice)? {
            taps[k].extend(sample.into_iter().map(|(i, t)| (i, t * w)));
        }
    }
    let flat = tape.reshape(features, &[c, g.bev_cells()])?;
    let pooled = tape.gather(flat, taps)?;
    tape.transpose(pooled)
}

/// Per map class: the mean of the features over cells whose probability is at
/// least `threshold`, `[N_Map, C]`.
pub fn map_prototypes(
    tape: &mut Tape,
    features: Var,
    g: &GridGeometry,
    probabilities: &Array,
    threshold: f64,
) -> Result<Var> {
    let c = check_bev(tape, features, g, "map_prototypes")?;
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::contract(format!("map threshold {threshold} outside (0,1)")));
    }
    let s = probabilities.shape();
    if s.len() != 3 || s[1] != g.x || s[2] != g.y {
        return Err(Error::shape("map_prototypes", s, &g.bev_shape()));
    }
    let cells = g.bev_cells();
    let taps: Taps = (0..s[0])
        .map(|k| {
            let sel: Vec<usize> = (0..cells)
                .filter(|&i| probabilities.data()[k * cells + i] >= threshold)
                .collect();
            let w = 1.0 / sel.len().max(1) as f64;
            sel.into_iter().map(|i| (i, w)).collect()
        })
        .collect();
    let flat = tape.reshape(features, &[c, cells])?;
    let pooled = tape.gather(flat, taps)?;
    tape.transpose(pooled)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Source {
    Det,
    Map,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Contributor {
    pub source: Source,
    pub index: usize,
}

/// Contributors for each occupancy group member, in occupancy order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorrespondenceTable {
    pub members: Vec<ClassId>,
    pub contributors: Vec<Vec<Contributor>>,
}

impl CorrespondenceTable {
    /// Foreground members take their detection class; background members take
    /// every map class drawn from them.
    pub fn from_taxonomy(taxonomy: &ClassTaxonomy) -> Self {
        let members = taxonomy.occ_order();
        let contributors = members
            .iter()
            .map(|&m| match taxonomy.det_index(m) {
                Some(index) => vec![Contributor {
                    source: Source::Det,
                    index,
                }],
                None => taxonomy
                    .map_classes
                    .iter()
                    .enumerate()
                    .filter(|(_, mc)| mc.source == m)
                    .map(|(index, _)| Contributor {
                        source: Source::Map,
                        index,
                    })
                    .collect(),
            })
            .collect();
        Self { members, contributors }
    }

    /// The same table with every contributor from `source` removed.
    pub fn without(&self, source: Source) -> Self {
        Self {
            members: self.members.clone(),
            contributors: self
                .contributors
                .iter()
                .map(|cs| cs.iter().copied().filter(|c| c.source != source).collect())
                .collect(),
        }
    }

    pub fn validate(&self, n_det: usize, n_map: usize) -> Result<()> {
        if self.members.len() != self.contributors.len() {
            return Err(Error::Config("correspondence table rows do not match members".into()));
        }
        for c in self.contributors.iter().flatten() {
            let limit = match c.source {
                Source::Det => n_det,
                Source::Map => n_map,
            };
            if c.index >= limit {
                return Err(Error::Config(format!(
                    "correspondence contributor {:?} #{} out of range",
                    c.source, c.index
                )));
            }
        }
        Ok(())
    }

    /// Mixing matrix `[members, n_det + n_map]` holding `1/len` per contributor.
    pub fn mixing_matrix(&self, n_det: usize, n_map: usize) -> Array {
        let cols = n_det + n_map;
        let mut a = Array::zeros(&[self.members.len(), cols]);
        for (r, cs) in self.contributors.iter().enumerate() {
            for c in cs {
                let col = match c.source {
                    Source::Det => c.index,
                    Source::Map => n_det + c.index,
                };
                a.data_mut()[r * cols + col] += 1.0 / cs.len() as f64;
            }
        }
        a
    }
}

/// Scene prototypes: each occupancy member plus the mean of its contributors
/// (copied unchanged when it has none).
pub fn aggregate(
    tape: &mut Tape,
    occ_group: Var,
    det_prototypes: Var,
    map_prototypes: Var,
    table: &CorrespondenceTable,
) -> Result<Var> {
    let n_det = tape.shape(det_prototypes)[0];
    let n_map = tape.shape(map_prototypes)[0];
    table.validate(n_det, n_map)?;
    if tape.shape(occ_group)[0] != table.members.len() {
        return Err(Error::shape(
            "aggregate",
            tape.shape(occ_group),
            &[table.members.len()],
        ));
    }
    let sources = tape.concat(&[det_prototypes, map_prototypes])?;
    let mix = tape.constant(table.mixing_matrix(n_det, n_map));
    let added = tape.matmul(mix, sources)?;
    tape.add(occ_group, added)
}
