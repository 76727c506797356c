use crate::cpg::{Cpg, CpgOutput};
use crate::error::{Error, Result};
use crate::heads::{decode_boxes, DetectionHead, DetectionRaw, MapHead, OccupancyDecoder};
use crate::losses::{self, LossBreakdown, LossVars, SuppressionTerm};
use crate::numerics::{derive_seed, Array, Mask, ParamId, ParamStore, Tape, Var};
use crate::scene::{
    derive_roi_mask, synthesize_scene, BevBox, ClassId, ClassTaxonomy, GridGeometry, GroundTruthScene, SceneConfig,
    SharedVoxelFeatures, Task,
};
use crate::spa::{self, CorrespondenceTable, DecodedBox, Source};
use crate::tsfg::{Transform, TsfgBranch, TsfgOutput};

use super::config::{LossClamps, Toggles, TrainConfig};

/// One scene's shared features and every target the losses need.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub seed: u64,
    pub features: Array,
    pub labels: Vec<ClassId>,
    pub map_masks: Vec<Mask>,
    pub boxes: Vec<BevBox>,
    /// Suppression supervision in task order.
    pub roi: [Mask; 3],
}

impl Sample {
    pub fn new(features: SharedVoxelFeatures, gt: &GroundTruthScene) -> Self {
        Self {
            seed: gt.seed,
            features: features.features,
            labels: gt.voxel_labels.clone(),
            map_masks: gt.map_masks.clone(),
            boxes: gt.bev_boxes(),
            roi: Task::ALL.map(|t| derive_roi_mask(gt, t).mask),
        }
    }

    pub fn synthesize(cfg: &SceneConfig, seed: u64) -> Result<Self> {
        let (f, gt) = synthesize_scene(cfg, seed)?;
        Ok(Self::new(f, &gt))
    }
}

/// Everything one forward pass records.
#[derive(Clone, Debug)]
pub struct Forward {
    pub cpg: Option<CpgOutput>,
    /// Branch outputs in task order; `None` where the branch is off.
    pub branches: Vec<Option<TsfgOutput>>,
    /// Features reaching each head, in task order.
    pub task_features: [Var; 3],
    pub det: DetectionRaw,
    pub boxes: Vec<DecodedBox>,
    pub map: Var,
    /// Occupancy queries: learned, the occupancy group, or scene prototypes.
    pub queries: Var,
    pub occ: Var,
}

/// Detached predictions used for evaluation.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub boxes: Vec<DecodedBox>,
    pub map_probabilities: Array,
    pub occ_logits: Array,
}

#[derive(Clone, Debug)]
pub struct Model {
    pub toggles: Toggles,
    pub taxonomy: ClassTaxonomy,
    pub geometry: GridGeometry,
    pub channels: usize,
    pub table: CorrespondenceTable,
    pub decode_threshold: f64,
    pub map_threshold: f64,
    pub roi_lattice: usize,
    pub store: ParamStore,
    pub cpg: Option<Cpg>,
    pub transforms: Vec<Transform>,
    pub branches: Vec<Option<TsfgBranch>>,
    pub det_head: DetectionHead,
    pub map_head: MapHead,
    pub occ_decoder: OccupancyDecoder,
    /// Learned occupancy queries, present only without prototype generation.
    pub queries: Option<ParamId>,
}

fn task_index(t: Task) -> usize {
    match t {
        Task::Det => 0,
        Task::Map => 1,
        Task::Occ => 2,
    }
}

impl Model {
    pub fn new(cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let sc = &cfg.scene_config;
        let tax = sc.taxonomy.clone();
        let g = sc.geometry;
        let c = sc.channels;
        let toggles = cfg.toggles;
        let seed = derive_seed(cfg.seed, "model");
        let mut store = ParamStore::new();

        let cpg = toggles.use_cpg.then(|| Cpg::new(&mut store, &tax, c, seed)).transpose()?;
        let transforms = Task::ALL
            .iter()
            .map(|&t| Transform::new(&mut store, t, c, g.z, seed))
            .collect::<Result<Vec<_>>>()?;
        let group_sizes = [tax.n_fg(), tax.n_bg(), tax.k()];
        let branches = Task::ALL
            .iter()
            .zip(toggles.tsfg())
            .zip(group_sizes)
            .map(|((&t, on), n)| {
                on.then(|| TsfgBranch::new(&mut store, t, toggles.tsfg_parts, c, n, seed))
                    .transpose()
            })
            .collect::<Result<Vec<_>>>()?;
        let det_head = DetectionHead::new(&mut store, c, tax.n_det(), seed)?;
        let map_head = MapHead::new(&mut store, c, tax.n_map(), seed)?;
        let occ_decoder = OccupancyDecoder::new(&mut store, c, seed)?;
        let queries = (!toggles.use_cpg)
            .then(|| store.add_uniform("head/occ/queries", &[tax.k(), c], c, seed))
            .transpose()?;

        let mut table = CorrespondenceTable::from_taxonomy(&tax);
        if !toggles.spa_sources.det {
            table = table.without(Source::Det);
        }
        if !toggles.spa_sources.map {
            table = table.without(Source::Map);
        }
        table.validate(tax.n_det(), tax.n_map())?;

        Ok(Self {
            toggles,
            taxonomy: tax,
            geometry: g,
            channels: c,
            table,
            decode_threshold: cfg.decode_threshold,
            map_threshold: cfg.map_threshold,
            roi_lattice: cfg.roi_lattice,
            store,
            cpg,
            transforms,
            branches,
            det_head,
            map_head,
            occ_decoder,
            queries,
        })
    }

    pub fn branch(&self, task: Task) -> Option<&TsfgBranch> {
        self.branches[task_index(task)].as_ref()
    }

    /// Parameters owned by one task: its transform, enhancement branch and head.
    pub fn task_params(&self, task: Task) -> Vec<ParamId> {
        let i = task_index(task);
        let mut ids = self.transforms[i].params();
        if let Some(b) = &self.branches[i] {
            ids.extend(b.params());
        }
        ids.extend(match task {
            Task::Det => self.det_head.params(),
            Task::Map => self.map_head.params(),
            Task::Occ => {
                let mut v = self.occ_decoder.params();
                v.extend(self.queries);
                v
            }
        });
        ids
    }

    pub fn forward(&self, tape: &mut Tape, features: &Array) -> Result<Forward> {
        let g = &self.geometry;
        let fs = tape.constant(features.clone());
        let cpg = match &self.cpg {
            Some(c) => Some(c.forward(tape, &self.store, fs, &self.taxonomy)?),
            None => None,
        };
        let mut branches = Vec::with_capacity(3);
        let mut task_features = Vec::with_capacity(3);
        for (i, &task) in Task::ALL.iter().enumerate() {
            let x = self.transforms[i].forward(tape, &self.store, fs)?;
            match &self.branches[i] {
                Some(b) => {
                    let group = cpg.as_ref().map(|c| match task {
                        Task::Det => c.groups.det.vectors,
                        Task::Map => c.groups.map.vectors,
                        Task::Occ => c.groups.occ.vectors,
                    });
                    let out = b.forward(tape, &self.store, x, group)?;
                    task_features.push(out.task_specific);
                    branches.push(Some(out));
                }
                None => {
                    task_features.push(x);
                    branches.push(None);
                }
            }
        }
        let task_features: [Var; 3] = task_features.try_into().expect("three tasks");

        let det = self.det_head.detect(tape, &self.store, task_features[0])?;
        let boxes = decode_boxes(
            tape.value(det.heatmaps),
            tape.value(det.regression),
            g,
            &self.taxonomy,
            self.decode_threshold,
        )?;
        let map = self.map_head.segment(tape, &self.store, task_features[1])?;

        let queries = match (&cpg, self.queries) {
            (None, Some(q)) => tape.param(&self.store, q),
            (Some(c), _) if !self.toggles.use_spa => c.groups.occ.vectors,
            (Some(c), _) => {
                let (fd, fm) = if self.toggles.spa_stop_gradient {
                    (tape.detach(task_features[0]), tape.detach(task_features[1]))
                } else {
                    (task_features[0], task_features[1])
                };
                let p_det = spa::detection_prototypes(tape, fd, g, &self.taxonomy, &boxes, self.roi_lattice)?;
                let probs = tape.value(map).clone();
                let p_map = spa::map_prototypes(tape, fm, g, &probs, self.map_threshold)?;
                spa::aggregate(tape, c.groups.occ.vectors, p_det, p_map, &self.table)?
            }
            (None, None) => return Err(Error::contract("model has neither prototypes nor learned queries")),
        };
        let occ = self.occ_decoder.predict(tape, &self.store, task_features[2], queries)?;
        Ok(Forward {
            cpg,
            branches,
            task_features,
            det,
            boxes,
            map,
            queries,
            occ,
        })
    }

    /// The five loss terms for one scene. Disabled components contribute a
    /// constant zero.
    pub fn losses(
        &self,
        tape: &mut Tape,
        fwd: &Forward,
        sample: &Sample,
        clamps: &LossClamps,
    ) -> Result<(Var, LossBreakdown)> {
        let l_cpg = match &fwd.cpg {
            Some(c) => losses::cpg_loss(tape, c.scores, &sample.labels)?,
            None => tape.constant(Array::scalar(0.0)),
        };
        let terms: Vec<SuppressionTerm> = Task::ALL
            .iter()
            .enumerate()
            .filter_map(|(i, &task)| {
                let scores = fwd.branches[i].as_ref()?.scores?;
                Some(SuppressionTerm {
                    task,
                    scores,
                    roi: &sample.roi[i],
                })
            })
            .collect();
        let l_sup = losses::partial_suppression_loss(tape, &terms, clamps.focal)?;
        let l_det = losses::det_loss(tape, fwd.det, &sample.boxes, &self.geometry, &self.taxonomy, clamps.focal)?;
        let l_map = losses::map_loss(tape, fwd.map, &sample.map_masks, clamps.focal)?;
        let l_occ = losses::occ_loss(tape, fwd.occ, &sample.labels, &self.taxonomy)?;
        losses::total_loss(
            tape,
            LossVars {
                l_cpg,
                l_sup,
                l_det,
                l_map,
                l_occ,
            },
        )
    }

    /// Loss breakdown for one scene without touching gradients.
    pub fn evaluate_loss(&self, sample: &Sample, clamps: &LossClamps) -> Result<LossBreakdown> {
        let mut tape = Tape::new();
        let fwd = self.forward(&mut tape, &sample.features)?;
        Ok(self.losses(&mut tape, &fwd, sample, clamps)?.1)
    }

    pub fn predict(&self, features: &Array) -> Result<Prediction> {
        let mut tape = Tape::new();
        let fwd = self.forward(&mut tape, features)?;
        Ok(Prediction {
            boxes: fwd.boxes,
            map_probabilities: tape.value(fwd.map).clone(),
            occ_logits: tape.value(fwd.occ).clone(),
        })
    }
}
