//! Evaluation: BEV map IoU, voxel occupancy IoU and center-distance AP.
//! Intersections and unions are summed over every evaluated scene before
//! dividing; detection matches are pooled across scenes before ranking.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Array, Mask};
use crate::scene::{BevBox, ClassId, ClassTaxonomy};
use crate::spa::DecodedBox;

/// Per-class intersection and union counts.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IouCounts {
    pub intersection: Vec<u64>,
    pub union: Vec<u64>,
}

impl IouCounts {
    pub fn new(classes: usize) -> Self {
        Self {
            intersection: vec![0; classes],
            union: vec![0; classes],
        }
    }

    pub fn merge(&mut self, other: &IouCounts) {
        for (a, b) in self.intersection.iter_mut().zip(&other.intersection) {
            *a += b;
        }
        for (a, b) in self.union.iter_mut().zip(&other.union) {
            *a += b;
        }
    }

    /// IoU per class; `None` where the union is empty.
    pub fn per_class(&self) -> Vec<Option<f64>> {
        self.intersection
            .iter()
            .zip(&self.union)
            .map(|(&i, &u)| (u > 0).then(|| i as f64 / u as f64))
            .collect()
    }

    pub fn mean(&self) -> Option<f64> {
        mean_defined(&self.per_class())
    }
}

fn mean_defined(values: &[Option<f64>]) -> Option<f64> {
    let defined: Vec<f64> = values.iter().flatten().copied().collect();
    (!defined.is_empty()).then(|| defined.iter().sum::<f64>() / defined.len() as f64)
}

/// Map IoU counts of thresholded probabilities `[N_Map, X, Y]` against the
/// ground-truth layers.
pub fn map_iou_counts(probabilities: &Array, gt: &[Mask], threshold: f64) -> Result<IouCounts> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::contract(format!("map threshold {threshold} outside (0,1)")));
    }
    let n = probabilities.shape()[0];
    if gt.len() != n || gt.iter().any(|m| m.len() * n != probabilities.len()) {
        return Err(Error::shape(
            "map_miou",
            probabilities.shape(),
            &[gt.len(), gt.first().map_or(0, Mask::len)],
        ));
    }
    let cells = probabilities.len() / n;
    let mut counts = IouCounts::new(n);
    for (k, m) in gt.iter().enumerate() {
        for c in 0..cells {
            let p = probabilities.data()[k * cells + c] >= threshold;
            let t = m.bits()[c];
            counts.intersection[k] += (p && t) as u64;
            counts.union[k] += (p || t) as u64;
        }
    }
    Ok(counts)
}

/// Mean IoU and per-class table; the mean is `None` if every union is empty.
pub fn map_miou(probabilities: &Array, gt: &[Mask], threshold: f64) -> Result<(Vec<Option<f64>>, Option<f64>)> {
    let c = map_iou_counts(probabilities, gt, threshold)?;
    Ok((c.per_class(), c.mean()))
}

/// `(K+1)×(K+1)` confusion matrix on the occupancy class axis (rows truth,
/// columns prediction), free last.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Confusion {
    pub classes: usize,
    pub counts: Vec<u64>,
}

impl Confusion {
    pub fn new(classes: usize) -> Self {
        Self {
            classes,
            counts: vec![0; classes * classes],
        }
    }

    pub fn add(&mut self, truth: usize, pred: usize) {
        self.counts[truth * self.classes + pred] += 1;
    }

    pub fn merge(&mut self, other: &Confusion) {
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
    }

    /// IoU counts of the first `semantic` classes (free excluded).
    pub fn iou_counts(&self, semantic: usize) -> IouCounts {
        let n = self.classes;
        let mut out = IouCounts::new(semantic);
        for k in 0..semantic {
            let tp = self.counts[k * n + k];
            let row: u64 = (0..n).map(|j| self.counts[k * n + j]).sum();
            let col: u64 = (0..n).map(|i| self.counts[i * n + k]).sum();
            out.intersection[k] = tp;
            out.union[k] = row + col - tp;
        }
        out
    }
}

/// Confusion of the argmax over occupancy logits `[K+1, ..]` against labels.
pub fn occ_confusion(logits: &Array, labels: &[ClassId], taxonomy: &ClassTaxonomy) -> Result<Confusion> {
    let k1 = taxonomy.k() + 1;
    if logits.shape()[0] != k1 || logits.len() != k1 * labels.len() {
        return Err(Error::shape("occ_miou", logits.shape(), &[k1, labels.len()]));
    }
    let n = labels.len();
    let d = logits.data();
    let mut conf = Confusion::new(k1);
    for (v, &label) in labels.iter().enumerate() {
        let mut best = 0;
        for c in 1..k1 {
            if d[c * n + v] > d[best * n + v] {
                best = c;
            }
        }
        conf.add(taxonomy.occ_channel(label), best);
    }
    Ok(conf)
}

/// Per-class IoU in occupancy order (free excluded) and the mean over classes
/// present in truth or prediction.
pub fn occ_miou(
    logits: &Array,
    labels: &[ClassId],
    taxonomy: &ClassTaxonomy,
) -> Result<(Vec<Option<f64>>, Option<f64>)> {
    let c = occ_confusion(logits, labels, taxonomy)?.iou_counts(taxonomy.k());
    Ok((c.per_class(), c.mean()))
}

/// Default center-distance thresholds: one and two cells.
pub fn default_thresholds(cell_size: f64) -> Vec<f64> {
    vec![cell_size, 2.0 * cell_size]
}

/// One scene's predictions and ground truth.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DetectionScene {
    pub predictions: Vec<DecodedBox>,
    pub ground_truth: Vec<BevBox>,
}

/// All-point interpolated area under the precision-recall curve.
pub fn average_precision(tp: &[bool], n_gt: usize) -> f64 {
    if n_gt == 0 {
        return 0.0;
    }
    let mut prec = Vec::with_capacity(tp.len());
    let mut rec = Vec::with_capacity(tp.len());
    let mut hits = 0usize;
    for (i, &t) in tp.iter().enumerate() {
        hits += t as usize;
        prec.push(hits as f64 / (i + 1) as f64);
        rec.push(hits as f64 / n_gt as f64);
    }
    for i in (0..prec.len().saturating_sub(1)).rev() {
        prec[i] = prec[i].max(prec[i + 1]);
    }
    let mut ap = 0.0;
    let mut last_r = 0.0;
    for (p, r) in prec.iter().zip(&rec) {
        ap += (r - last_r) * p;
        last_r = *r;
    }
    ap
}

/// AP for one class at one threshold. `None` when the class has neither
/// ground truth nor predictions.
pub fn class_ap(scenes: &[DetectionScene], class: ClassId, threshold: f64) -> Option<f64> {
    let mut ranked: Vec<(f64, usize, usize)> = Vec::new();
    let mut n_gt = 0;
    for (s, scene) in scenes.iter().enumerate() {
        n_gt += scene.ground_truth.iter().filter(|b| b.class == class).count();
        for (i, p) in scene.predictions.iter().enumerate() {
            if p.bev.class == class {
                ranked.push((p.score, s, i));
            }
        }
    }
    if n_gt == 0 && ranked.is_empty() {
        return None;
    }
    ranked.sort_by(|a, b| b.0.total_cmp(&a.0).then((a.1, a.2).cmp(&(b.1, b.2))));
    let mut used: Vec<Vec<bool>> = scenes.iter().map(|s| vec![false; s.ground_truth.len()]).collect();
    let mut tp = Vec::with_capacity(ranked.len());
    for &(_, s, i) in &ranked {
        let c = scenes[s].predictions[i].bev.center;
        let mut best: Option<(f64, usize)> = None;
        for (g, gt) in scenes[s].ground_truth.iter().enumerate() {
            if gt.class != class || used[s][g] {
                continue;
            }
            let d = ((gt.center[0] - c[0]).powi(2) + (gt.center[1] - c[1]).powi(2)).sqrt();
            if d <= threshold && best.is_none_or(|(bd, _)| d < bd) {
                best = Some((d, g));
            }
        }
        match best {
            Some((_, g)) => {
                used[s][g] = true;
                tp.push(true);
            }
            None => tp.push(false),
        }
    }
    Some(average_precision(&tp, n_gt))
}

/// Per detection class and threshold AP plus the mean over classes, then
/// over thresholds.
pub fn detection_ap(
    scenes: &[DetectionScene],
    taxonomy: &ClassTaxonomy,
    thresholds: &[f64],
) -> (Vec<Vec<Option<f64>>>, Option<f64>) {
    let table: Vec<Vec<Option<f64>>> = taxonomy
        .foreground
        .iter()
        .map(|&c| thresholds.iter().map(|&t| class_ap(scenes, c, t)).collect())
        .collect();
    let per_threshold: Vec<Option<f64>> = (0..thresholds.len())
        .map(|t| mean_defined(&table.iter().map(|row| row[t]).collect::<Vec<_>>()))
        .collect();
    (table, mean_defined(&per_threshold))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassScore {
    pub class: String,
    pub value: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub map_miou: Option<f64>,
    pub occ_miou: Option<f64>,
    pub det_map: Option<f64>,
    pub map_iou: Vec<ClassScore>,
    pub occ_iou: Vec<ClassScore>,
    /// AP per class, averaged over thresholds.
    pub det_ap: Vec<ClassScore>,
    pub thresholds: Vec<f64>,
}

impl MetricsReport {
    pub const CSV_HEADER: &'static str = "map_miou,occ_miou,det_map";

    pub fn csv_row(&self) -> String {
        [self.map_miou, self.occ_miou, self.det_map]
            .iter()
            .map(|v| fmt_opt(*v))
            .collect::<Vec<_>>()
            .join(",")
    }
}

pub fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.6}")).unwrap_or_default()
}

/// Accumulates evaluation over scenes.
#[derive(Clone, Debug)]
pub struct Evaluator {
    taxonomy: ClassTaxonomy,
    map_threshold: f64,
    thresholds: Vec<f64>,
    map: IouCounts,
    occ: Confusion,
    det: Vec<DetectionScene>,
}

impl Evaluator {
    pub fn new(taxonomy: &ClassTaxonomy, map_threshold: f64, thresholds: Vec<f64>) -> Self {
        Self {
            taxonomy: taxonomy.clone(),
            map_threshold,
            thresholds,
            map: IouCounts::new(taxonomy.n_map()),
            occ: Confusion::new(taxonomy.k() + 1),
            det: Vec::new(),
        }
    }

    pub fn add_scene(
        &mut self,
        map_probabilities: &Array,
        map_gt: &[Mask],
        occ_logits: &Array,
        labels: &[ClassId],
        detection: DetectionScene,
    ) -> Result<()> {
        self.map.merge(&map_iou_counts(map_probabilities, map_gt, self.map_threshold)?);
        self.occ.merge(&occ_confusion(occ_logits, labels, &self.taxonomy)?);
        self.det.push(detection);
        Ok(())
    }

    pub fn report(&self) -> MetricsReport {
        let tax = &self.taxonomy;
        let occ = self.occ.iou_counts(tax.k());
        let (ap, det_map) = detection_ap(&self.det, tax, &self.thresholds);
        let named = |names: Vec<String>, vals: Vec<Option<f64>>| {
            names
                .into_iter()
                .zip(vals)
                .map(|(class, value)| ClassScore { class, value })
                .collect()
        };
        MetricsReport {
            map_miou: self.map.mean(),
            occ_miou: occ.mean(),
            det_map,
            map_iou: named(
                tax.map_classes.iter().map(|m| m.name.clone()).collect(),
                self.map.per_class(),
            ),
            occ_iou: named(
                tax.occ_order().iter().map(|&c| tax.name(c).to_string()).collect(),
                occ.per_class(),
            ),
            det_ap: named(
                tax.foreground.iter().map(|&c| tax.name(c).to_string()).collect(),
                ap.iter().map(|row| mean_defined(row)).collect(),
            ),
            thresholds: self.thresholds.clone(),
        }
    }
}
