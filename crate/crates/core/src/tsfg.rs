//! Task-specific feature generation. Shared voxel features are transformed
//! per task (height folded into channels for BEV tasks), enhanced with
//! prototype-wise similarity maps and prototype-aware channel scaling, and
//! gated by a supervised per-cell suppression score.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{ConvLayer, ConvRank, Mlp};
use crate::numerics::{ParamId, ParamStore, Reduce, Tape, Var};
use crate::scene::Task;

fn rank_of(task: Task) -> ConvRank {
    if task.is_bev() {
        ConvRank::Bev
    } else {
        ConvRank::Voxel
    }
}

/// Two 3×3 (or 3×3×3) relu convolutions taking `F_s` into the task domain.
#[derive(Clone, Debug)]
pub struct Transform {
    pub task: Task,
    pub layers: [ConvLayer; 2],
}

impl Transform {
    pub fn new(store: &mut ParamStore, task: Task, channels: usize, depth: usize, seed: u64) -> Result<Self> {
        let rank = rank_of(task);
        let cin = if task.is_bev() { channels * depth } else { channels };
        let name = format!("transform/{}", task.as_str());
        Ok(Self {
            task,
            layers: [
                ConvLayer::new(store, &format!("{name}/0"), rank, cin, channels, 3, seed)?,
                ConvLayer::new(store, &format!("{name}/1"), rank, channels, channels, 3, seed)?,
            ],
        })
    }

    /// `F_s [C,X,Y,Z]` to `[C,X,Y]` (Det, Map) or `[C,X,Y,Z]` (Occ).
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, shared: Var) -> Result<Var> {
        if tape.shape(shared).len() != 4 {
            return Err(Error::contract(format!(
                "shared features must be C×X×Y×Z, got {:?}",
                tape.shape(shared)
            )));
        }
        let mut x = if self.task.is_bev() {
            tape.collapse_height(shared)?
        } else {
            shared
        };
        for layer in &self.layers {
            x = layer.forward(tape, store, x)?;
            x = tape.relu(x)?;
        }
        Ok(x)
    }

    pub fn params(&self) -> Vec<ParamId> {
        self.layers.iter().flat_map(|l| l.params()).collect()
    }
}

fn flatten(tape: &mut Tape, x: Var) -> Result<(Var, Vec<usize>)> {
    let shape = tape.shape(x).to_vec();
    let s = shape[1..].iter().product::<usize>();
    Ok((tape.reshape(x, &[shape[0], s])?, shape))
}

/// `F_wise[n](x) = ⟨mlp(G[n]), F(·,x)⟩`, one channel per group member.
pub fn prototype_wise(tape: &mut Tape, store: &ParamStore, mlp: &Mlp, features: Var, group: Var) -> Result<Var> {
    let c = tape.shape(features)[0];
    if tape.shape(group).len() != 2 || tape.shape(group)[1] != c {
        return Err(Error::shape("prototype_wise", tape.shape(features), tape.shape(group)));
    }
    let projected = mlp.forward(tape, store, group)?;
    let (flat, shape) = flatten(tape, features)?;
    let sim = tape.matmul(projected, flat)?;
    let mut out_shape = shape;
    out_shape[0] = tape.shape(group)[0];
    tape.reshape(sim, &out_shape)
}

/// Channel scale `γ = σ(mlp([max G; mean G]))` and the rescaled features.
pub fn prototype_aware(
    tape: &mut Tape,
    store: &ParamStore,
    mlp: &Mlp,
    features: Var,
    group: Var,
) -> Result<(Var, Var)> {
    let c = tape.shape(features)[0];
    if tape.shape(group).len() != 2 || tape.shape(group)[1] != c {
        return Err(Error::shape("prototype_aware", tape.shape(features), tape.shape(group)));
    }
    let mx = tape.reduce_rows(group, Reduce::Max)?;
    let mean = tape.reduce_rows(group, Reduce::Mean)?;
    let pooled = tape.concat(&[mx, mean])?;
    let pooled = tape.reshape(pooled, &[1, 2 * c])?;
    let logits = mlp.forward(tape, store, pooled)?;
    let gamma = tape.sigmoid(logits)?;
    let gamma = tape.reshape(gamma, &[c])?;
    let scaled = tape.scale_channels(features, gamma)?;
    Ok((scaled, gamma))
}

/// Per-cell gate broadcast over channels.
pub fn apply_suppression(tape: &mut Tape, enhanced: Var, scores: Var) -> Result<Var> {
    tape.gate_cells(enhanced, scores)
}

/// Sub-switches of one enhancement branch.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TsfgParts {
    pub prototype_wise: bool,
    pub prototype_aware: bool,
    pub suppression: bool,
}

impl TsfgParts {
    pub const ALL: Self = Self {
        prototype_wise: true,
        prototype_aware: true,
        suppression: true,
    };

    pub fn uses_prototypes(&self) -> bool {
        self.prototype_wise || self.prototype_aware
    }
}

impl Default for TsfgParts {
    fn default() -> Self {
        Self::ALL
    }
}

#[derive(Clone, Debug)]
pub struct TsfgOutput {
    /// Task features after the transform.
    pub transformed: Var,
    pub wise: Option<Var>,
    pub gamma: Option<Var>,
    /// `F_aware`, equal to the transformed features when scaling is off.
    pub aware: Var,
    pub enhanced: Var,
    /// Suppression scores over the task cells, without a channel axis.
    pub scores: Option<Var>,
    pub task_specific: Var,
}

/// Enhancement and suppression for one task.
#[derive(Clone, Debug)]
pub struct TsfgBranch {
    pub task: Task,
    pub parts: TsfgParts,
    pub wise_mlp: Option<Mlp>,
    pub aware_mlp: Option<Mlp>,
    pub fuse: ConvLayer,
    pub score_hidden: Option<ConvLayer>,
    pub score_out: Option<ConvLayer>,
}

impl TsfgBranch {
    pub fn new(
        store: &mut ParamStore,
        task: Task,
        parts: TsfgParts,
        channels: usize,
        group_size: usize,
        seed: u64,
    ) -> Result<Self> {
        let rank = rank_of(task);
        let name = format!("tsfg/{}", task.as_str());
        let c = channels;
        let wise_mlp = parts
            .prototype_wise
            .then(|| Mlp::new(store, &format!("{name}/wise_mlp"), c, c, c, seed))
            .transpose()?;
        let aware_mlp = parts
            .prototype_aware
            .then(|| Mlp::new(store, &format!("{name}/aware_mlp"), 2 * c, c, c, seed))
            .transpose()?;
        let fuse_in = c + if parts.prototype_wise { group_size } else { 0 };
        let fuse = ConvLayer::new(store, &format!("{name}/fuse"), rank, fuse_in, c, 3, seed)?;
        let (score_hidden, score_out) = if parts.suppression {
            (
                Some(ConvLayer::new(store, &format!("{name}/score_hidden"), rank, c, c, 3, seed)?),
                Some(ConvLayer::new(store, &format!("{name}/score_out"), rank, c, 1, 1, seed)?),
            )
        } else {
            (None, None)
        };
        Ok(Self {
            task,
            parts,
            wise_mlp,
            aware_mlp,
            fuse,
            score_hidden,
            score_out,
        })
    }

    /// Concatenates the available branches and fuses them back to `C` channels.
    pub fn enhance(&self, tape: &mut Tape, store: &ParamStore, wise: Option<Var>, aware: Var) -> Result<Var> {
        let x = match wise {
            Some(w) => {
                if tape.shape(w)[1..] != tape.shape(aware)[1..] {
                    return Err(Error::shape("enhance", tape.shape(w), tape.shape(aware)));
                }
                tape.concat(&[w, aware])?
            }
            None => aware,
        };
        self.fuse.forward(tape, store, x)
    }

    /// Scores in `[0,1]` over the task cells (`[X,Y]` or `[X,Y,Z]`).
    pub fn suppression_score(&self, tape: &mut Tape, store: &ParamStore, aware: Var) -> Result<Var> {
        let (Some(hidden), Some(out)) = (&self.score_hidden, &self.score_out) else {
            return Err(Error::contract("suppression predictor is disabled"));
        };
        let h = hidden.forward(tape, store, aware)?;
        let h = tape.relu(h)?;
        let s = out.forward(tape, store, h)?;
        let s = tape.sigmoid(s)?;
        let cells = tape.shape(s)[1..].to_vec();
        tape.reshape(s, &cells)
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        transformed: Var,
        group: Option<Var>,
    ) -> Result<TsfgOutput> {
        let need_group = || group.ok_or_else(|| Error::contract("prototype group required by TSFG"));
        let wise = match &self.wise_mlp {
            Some(mlp) => Some(prototype_wise(tape, store, mlp, transformed, need_group()?)?),
            None => None,
        };
        let (aware, gamma) = match &self.aware_mlp {
            Some(mlp) => {
                let (a, g) = prototype_aware(tape, store, mlp, transformed, need_group()?)?;
                (a, Some(g))
            }
            None => (transformed, None),
        };
        let enhanced = self.enhance(tape, store, wise, aware)?;
        let (scores, task_specific) = if self.parts.suppression {
            let s = self.suppression_score(tape, store, aware)?;
            (Some(s), apply_suppression(tape, enhanced, s)?)
        } else {
            (None, enhanced)
        };
        Ok(TsfgOutput {
            transformed,
            wise,
            gamma,
            aware,
            enhanced,
            scores,
            task_specific,
        })
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut ids = Vec::new();
        for mlp in self.wise_mlp.iter().chain(&self.aware_mlp) {
            for l in [&mlp.hidden, &mlp.out] {
                ids.extend([l.weight, l.bias]);
            }
        }
        ids.extend(self.fuse.params());
        for l in self.score_hidden.iter().chain(&self.score_out) {
            ids.extend(l.params());
        }
        ids
    }
}
