//! Class-wise prototype generation: a 1×1×1 mask classifier scores every
//! voxel, hard argmax masks select each class's voxels, and masked means of
//! the shared features become class prototypes. Prototypes plus learnable
//! embeddings are then split into per-task groups.

use crate::error::{Error, Result};
use crate::numerics::{ConvLayer, ConvRank};
use crate::numerics::{Array, Mask, ParamId, ParamStore, Tape, Taps, Var};
use crate::scene::{ClassId, ClassTaxonomy};

/// Post-softmax class confidences, `K×X×Y×Z`.
#[derive(Clone, Debug, PartialEq)]
pub struct SemanticScores {
    pub scores: Array,
}

impl SemanticScores {
    pub fn new(scores: Array) -> Result<Self> {
        if scores.ndim() != 4 {
            return Err(Error::contract(format!(
                "semantic scores must be K×X×Y×Z, got {:?}",
                scores.shape()
            )));
        }
        let s = Self { scores };
        let k = s.k();
        let n = s.voxels();
        let d = s.scores.data();
        for v in 0..n {
            let total: f64 = (0..k).map(|c| d[c * n + v]).sum();
            if (total - 1.0).abs() > 1e-9 || (0..k).any(|c| !(0.0..=1.0).contains(&d[c * n + v])) {
                return Err(Error::contract(format!("voxel {v} scores are not a distribution")));
            }
        }
        Ok(s)
    }

    pub fn k(&self) -> usize {
        self.scores.shape()[0]
    }

    pub fn voxels(&self) -> usize {
        self.scores.len() / self.k()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClassMask {
    pub class: ClassId,
    pub mask: Mask,
}

/// Ordered prototype vectors living on a tape, `[members, C]`.
#[derive(Clone, Debug, PartialEq)]
pub struct PrototypeGroup {
    pub members: Vec<ClassId>,
    pub vectors: Var,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TaskGroups {
    pub det: PrototypeGroup,
    pub map: PrototypeGroup,
    pub occ: PrototypeGroup,
}

/// Hard argmax masks, one per class in id order. Ties go to the smallest id.
pub fn build_class_masks(scores: &Array) -> Vec<ClassMask> {
    let k = scores.shape()[0];
    let spatial = scores.shape()[1..].to_vec();
    let n = scores.len() / k;
    let d = scores.data();
    let mut masks: Vec<ClassMask> = (0..k)
        .map(|c| ClassMask {
            class: ClassId(c as u16 + 1),
            mask: Mask::empty(&spatial),
        })
        .collect();
    for v in 0..n {
        let mut best = 0;
        for c in 1..k {
            if d[c * n + v] > d[best * n + v] {
                best = c;
            }
        }
        masks[best].mask.bits_mut()[v] = true;
    }
    masks
}

fn mean_taps(mask: &Mask) -> Vec<(usize, f64)> {
    let idx = mask.indices();
    let w = 1.0 / idx.len().max(1) as f64;
    idx.into_iter().map(|i| (i, w)).collect()
}

/// Masked mean of `F_s [C, X, Y, Z]` over one mask, as `[C]`. An empty mask
/// yields the zero vector.
pub fn pool_prototype(tape: &mut Tape, features: Var, mask: &Mask) -> Result<Var> {
    let flat = flatten_spatial(tape, features)?;
    if mask.len() != tape.shape(flat)[1] {
        return Err(Error::shape("pool_prototype", tape.shape(features), mask.shape()));
    }
    tape.masked_mean(flat, &mask.indices())
}

/// All class prototypes at once, `[K, C]` in mask order.
pub fn pool_prototypes(tape: &mut Tape, features: Var, masks: &[ClassMask]) -> Result<Var> {
    let flat = flatten_spatial(tape, features)?;
    if let Some(m) = masks.iter().find(|m| m.mask.len() != tape.shape(flat)[1]) {
        return Err(Error::shape("pool_prototypes", tape.shape(features), m.mask.shape()));
    }
    let taps: Taps = masks.iter().map(|m| mean_taps(&m.mask)).collect();
    let pooled = tape.gather(flat, taps)?;
    tape.transpose(pooled)
}

fn flatten_spatial(tape: &mut Tape, x: Var) -> Result<Var> {
    let shape = tape.shape(x).to_vec();
    let c = shape[0];
    let s = shape[1..].iter().product::<usize>();
    tape.reshape(x, &[c, s])
}

/// Adds the per-class embeddings to the prototypes and splits them into the
/// foreground and background groups.
pub fn assemble_groups(
    tape: &mut Tape,
    prototypes: Var,
    taxonomy: &ClassTaxonomy,
    embeddings: Var,
) -> Result<(PrototypeGroup, PrototypeGroup)> {
    if tape.shape(prototypes)[0] != taxonomy.k() {
        return Err(Error::contract(format!(
            "expected {} class prototypes, got {}",
            taxonomy.k(),
            tape.shape(prototypes)[0]
        )));
    }
    let enriched = tape.add(prototypes, embeddings)?;
    let rows = |ids: &[ClassId]| ids.iter().map(|c| c.0 as usize - 1).collect::<Vec<_>>();
    let fg = tape.select_rows(enriched, &rows(&taxonomy.foreground))?;
    let bg = tape.select_rows(enriched, &rows(&taxonomy.background))?;
    Ok((
        PrototypeGroup {
            members: taxonomy.foreground.clone(),
            vectors: fg,
        },
        PrototypeGroup {
            members: taxonomy.background.clone(),
            vectors: bg,
        },
    ))
}

/// `G_Det = P_FG`, `G_Map = P_BG`, `G_Occ = P_FG ∪ P_BG` (foreground first).
pub fn assign_task_groups(tape: &mut Tape, fg: PrototypeGroup, bg: PrototypeGroup) -> Result<TaskGroups> {
    let occ_vectors = tape.concat(&[fg.vectors, bg.vectors])?;
    let mut members = fg.members.clone();
    members.extend(&bg.members);
    Ok(TaskGroups {
        occ: PrototypeGroup {
            members,
            vectors: occ_vectors,
        },
        det: fg,
        map: bg,
    })
}

#[derive(Clone, Debug)]
pub struct CpgOutput {
    /// Softmax scores `[K, X, Y, Z]`.
    pub scores: Var,
    pub masks: Vec<ClassMask>,
    /// Pooled prototypes `[K, C]` before embeddings.
    pub prototypes: Var,
    pub groups: TaskGroups,
}

/// Mask classifier and per-class embeddings.
#[derive(Clone, Debug)]
pub struct Cpg {
    pub classifier: ConvLayer,
    pub embeddings: ParamId,
}

impl Cpg {
    pub fn new(store: &mut ParamStore, taxonomy: &ClassTaxonomy, channels: usize, seed: u64) -> Result<Self> {
        let k = taxonomy.k();
        let classifier = ConvLayer::new(store, "cpg/classifier", ConvRank::Voxel, channels, k, 1, seed)?;
        let embeddings = store.add_uniform("cpg/embeddings", &[k, channels], channels, seed)?;
        Ok(Self { classifier, embeddings })
    }

    pub fn classify_voxels(&self, tape: &mut Tape, store: &ParamStore, features: Var) -> Result<Var> {
        let logits = self.classifier.forward(tape, store, features)?;
        tape.softmax(logits, 0)
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        features: Var,
        taxonomy: &ClassTaxonomy,
    ) -> Result<CpgOutput> {
        let scores = self.classify_voxels(tape, store, features)?;
        let masks = build_class_masks(tape.value(scores));
        let prototypes = pool_prototypes(tape, features, &masks)?;
        let embeddings = tape.param(store, self.embeddings);
        let (fg, bg) = assemble_groups(tape, prototypes, taxonomy, embeddings)?;
        let groups = assign_task_groups(tape, fg, bg)?;
        Ok(CpgOutput {
            scores,
            masks,
            prototypes,
            groups,
        })
    }

    pub fn params(&self) -> Vec<ParamId> {
        vec![self.classifier.weight, self.classifier.bias, self.embeddings]
    }
}
