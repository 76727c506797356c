//! Loss primitives and the composed per-task losses.

use std::rc::Rc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::heads::{encode_box, DetectionRaw, REG_CHANNELS};
use crate::numerics::{Array, Mask, Primitive, Tape, Var};
use crate::scene::{BevBox, ClassId, ClassTaxonomy, GridGeometry, Task};

/// Probability clamp applied before every logarithm.
pub const EPS: f64 = 1e-7;

fn clamp(p: f64) -> f64 {
    p.clamp(EPS, 1.0 - EPS)
}

fn scalar(v: f64) -> Array {
    Array::scalar(v)
}

/// Mean focal loss. Negatives may carry an extra per-element weight.
struct Focal {
    alpha: f64,
    gamma: f64,
    targets: Rc<Vec<bool>>,
    neg_weights: Option<Rc<Vec<f64>>>,
}

impl Focal {
    fn neg_w(&self, i: usize) -> f64 {
        self.neg_weights.as_ref().map_or(1.0, |w| w[i])
    }
}

impl Primitive for Focal {
    fn name(&self) -> &'static str {
        "focal"
    }
    fn eval(&self, i: &[&Array]) -> Result<Array> {
        let p = i[0].data();
        let (a, g) = (self.alpha, self.gamma);
        let total: f64 = p
            .iter()
            .enumerate()
            .map(|(k, &raw)| {
                let p = clamp(raw);
                if self.targets[k] {
                    -a * (1.0 - p).powf(g) * p.ln()
                } else {
                    -(1.0 - a) * self.neg_w(k) * p.powf(g) * (1.0 - p).ln()
                }
            })
            .sum();
        Ok(scalar(total / p.len() as f64))
    }
    fn vjp(&self, i: &[&Array], _: &Array, gr: &Array, _: &[bool]) -> Vec<Option<Array>> {
        let n = i[0].len() as f64;
        let (a, g) = (self.alpha, self.gamma);
        let scale = gr.item() / n;
        let dx = Array::from_fn(i[0].shape(), |k| {
            let raw = i[0].data()[k];
            if raw < EPS || raw > 1.0 - EPS {
                return 0.0;
            }
            let p = raw;
            let d = if self.targets[k] {
                let mut d = -(1.0 - p).powf(g) / p;
                if g != 0.0 {
                    d += g * (1.0 - p).powf(g - 1.0) * p.ln();
                }
                a * d
            } else {
                let mut d = p.powf(g) / (1.0 - p);
                if g != 0.0 {
                    d -= g * p.powf(g - 1.0) * (1.0 - p).ln();
                }
                (1.0 - a) * self.neg_w(k) * d
            };
            d * scale
        });
        vec![Some(dx)]
    }
    fn kink_margin(&self, i: &[&Array]) -> f64 {
        i[0].data()
            .iter()
            .map(|&p| (p - EPS).abs().min((p - (1.0 - EPS)).abs()))
            .fold(f64::INFINITY, f64::min)
    }
}

/// Soft Dice over `[K, n]`, averaged over classes, smoothing 1.
struct Dice {
    targets: Rc<Vec<f64>>,
}

impl Dice {
    fn sums(&self, p: &Array) -> Vec<(f64, f64)> {
        let k = p.shape()[0];
        let n = p.len() / k;
        (0..k)
            .map(|c| {
                let (mut num, mut den) = (1.0, 1.0);
                for v in 0..n {
                    let (pv, tv) = (p.data()[c * n + v], self.targets[c * n + v]);
                    num += 2.0 * pv * tv;
                    den += pv + tv;
                }
                (num, den)
            })
            .collect()
    }
}

impl Primitive for Dice {
    fn name(&self) -> &'static str {
        "dice"
    }
    fn eval(&self, i: &[&Array]) -> Result<Array> {
        let s = self.sums(i[0]);
        let k = s.len() as f64;
        Ok(scalar(s.iter().map(|(a, b)| 1.0 - a / b).sum::<f64>() / k))
    }
    fn vjp(&self, i: &[&Array], _: &Array, g: &Array, _: &[bool]) -> Vec<Option<Array>> {
        let s = self.sums(i[0]);
        let k = s.len();
        let n = i[0].len() / k;
        let dx = Array::from_fn(i[0].shape(), |idx| {
            let (num, den) = s[idx / n];
            let t = self.targets[idx];
            -(2.0 * t * den - num) / (den * den) / k as f64 * g.item()
        });
        vec![Some(dx)]
    }
}

/// Per-class Lovász terms: the sorted order of cells and the Jaccard
/// extension weight at each sorted position.
fn lovasz_plan(p: &Array, labels: &[usize]) -> Vec<(usize, Vec<(usize, f64)>)> {
    let k = p.shape()[0];
    let n = labels.len();
    let mut plans = Vec::new();
    for c in 0..k {
        let fg: Vec<bool> = labels.iter().map(|&t| t == c).collect();
        let gts = fg.iter().filter(|&&f| f).count() as f64;
        if gts == 0.0 {
            continue;
        }
        let errs: Vec<f64> = (0..n)
            .map(|v| {
                let pv = p.data()[c * n + v];
                if fg[v] {
                    1.0 - pv
                } else {
                    pv
                }
            })
            .collect();
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| errs[b].total_cmp(&errs[a]).then(a.cmp(&b)));
        let (mut cum_fg, mut cum_bg) = (0.0, 0.0);
        let mut prev = 0.0;
        let weights = order
            .into_iter()
            .map(|v| {
                if fg[v] {
                    cum_fg += 1.0;
                } else {
                    cum_bg += 1.0;
                }
                let jac = 1.0 - (gts - cum_fg) / (gts + cum_bg);
                let w = jac - prev;
                prev = jac;
                (v, w)
            })
            .collect();
        plans.push((c, weights));
    }
    plans
}

struct Lovasz {
    labels: Rc<Vec<usize>>,
}

impl Primitive for Lovasz {
    fn name(&self) -> &'static str {
        "lovasz_softmax"
    }
    fn eval(&self, i: &[&Array]) -> Result<Array> {
        let p = i[0];
        let n = self.labels.len();
        let plans = lovasz_plan(p, &self.labels);
        if plans.is_empty() {
            return Ok(scalar(0.0));
        }
        let total: f64 = plans
            .iter()
            .map(|(c, ws)| {
                ws.iter()
                    .map(|&(v, w)| {
                        let pv = p.data()[c * n + v];
                        let e = if self.labels[v] == *c { 1.0 - pv } else { pv };
                        e * w
                    })
                    .sum::<f64>()
            })
            .sum();
        Ok(scalar(total / plans.len() as f64))
    }
    fn vjp(&self, i: &[&Array], _: &Array, g: &Array, _: &[bool]) -> Vec<Option<Array>> {
        let n = self.labels.len();
        let plans = lovasz_plan(i[0], &self.labels);
        let mut dx = Array::zeros(i[0].shape());
        if plans.is_empty() {
            return vec![Some(dx)];
        }
        let scale = g.item() / plans.len() as f64;
        for (c, ws) in &plans {
            for &(v, w) in ws {
                let sign = if self.labels[v] == *c { -1.0 } else { 1.0 };
                dx.data_mut()[c * n + v] += sign * w * scale;
            }
        }
        vec![Some(dx)]
    }
    /// Smallest gap between two errors of a present class: the sort order,
    /// and with it the Jaccard weights, flips there.
    fn kink_margin(&self, i: &[&Array]) -> f64 {
        let n = self.labels.len();
        let mut margin = f64::INFINITY;
        for c in 0..i[0].shape()[0] {
            if !self.labels.contains(&c) {
                continue;
            }
            let mut errs: Vec<f64> = (0..n)
                .map(|v| {
                    let pv = i[0].data()[c * n + v];
                    if self.labels[v] == c { 1.0 - pv } else { pv }
                })
                .collect();
            errs.sort_by(f64::total_cmp);
            margin = errs.windows(2).map(|w| w[1] - w[0]).fold(margin, f64::min);
        }
        margin
    }
}

/// Mean softmax cross-entropy over `[K, n]` logits.
struct SoftmaxCe {
    labels: Rc<Vec<usize>>,
}

impl SoftmaxCe {
    fn probs(&self, x: &Array) -> Vec<f64> {
        let k = x.shape()[0];
        let n = self.labels.len();
        let mut out = vec![0.0; k * n];
        for v in 0..n {
            let mx = (0..k).map(|c| x.data()[c * n + v]).fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = (0..k).map(|c| (x.data()[c * n + v] - mx).exp()).sum();
            for c in 0..k {
                out[c * n + v] = (x.data()[c * n + v] - mx).exp() / z;
            }
        }
        out
    }
}

impl Primitive for SoftmaxCe {
    fn name(&self) -> &'static str {
        "softmax_cross_entropy"
    }
    fn eval(&self, i: &[&Array]) -> Result<Array> {
        let x = i[0];
        let k = x.shape()[0];
        let n = self.labels.len();
        let mut total = 0.0;
        for v in 0..n {
            let mx = (0..k).map(|c| x.data()[c * n + v]).fold(f64::NEG_INFINITY, f64::max);
            let lse = mx + (0..k).map(|c| (x.data()[c * n + v] - mx).exp()).sum::<f64>().ln();
            total += lse - x.data()[self.labels[v] * n + v];
        }
        Ok(scalar(total / n as f64))
    }
    fn vjp(&self, i: &[&Array], _: &Array, g: &Array, _: &[bool]) -> Vec<Option<Array>> {
        let n = self.labels.len();
        let mut p = self.probs(i[0]);
        for v in 0..n {
            p[self.labels[v] * n + v] -= 1.0;
        }
        let s = g.item() / n as f64;
        vec![Some(Array::from_fn(i[0].shape(), |idx| p[idx] * s))]
    }
}

/// Mean absolute error against fixed targets.
struct L1 {
    targets: Rc<Vec<f64>>,
}

impl Primitive for L1 {
    fn name(&self) -> &'static str {
        "l1"
    }
    fn eval(&self, i: &[&Array]) -> Result<Array> {
        let x = i[0].data();
        Ok(scalar(
            x.iter().zip(self.targets.iter()).map(|(a, b)| (a - b).abs()).sum::<f64>() / x.len() as f64,
        ))
    }
    fn vjp(&self, i: &[&Array], _: &Array, g: &Array, _: &[bool]) -> Vec<Option<Array>> {
        let n = i[0].len() as f64;
        let dx = Array::from_fn(i[0].shape(), |k| {
            let d = i[0].data()[k] - self.targets[k];
            let s = if d > 0.0 {
                1.0
            } else if d < 0.0 {
                -1.0
            } else {
                0.0
            };
            s * g.item() / n
        });
        vec![Some(dx)]
    }
    fn kink_margin(&self, i: &[&Array]) -> f64 {
        i[0].data()
            .iter()
            .zip(self.targets.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(f64::INFINITY, f64::min)
    }
}

fn check_len(op: &'static str, tape: &Tape, x: Var, n: usize) -> Result<()> {
    if tape.value(x).len() != n {
        return Err(Error::contract(format!(
            "{op}: {} predictions against {n} targets",
            tape.value(x).len()
        )));
    }
    Ok(())
}

fn class_major(tape: &Tape, x: Var, labels: usize, op: &'static str) -> Result<usize> {
    let k = tape.shape(x)[0];
    if tape.value(x).len() != k * labels {
        return Err(Error::contract(format!(
            "{op}: shape {:?} does not hold {labels} cells per class",
            tape.shape(x)
        )));
    }
    Ok(k)
}

/// Focal loss of probabilities against binary targets (any matching shape).
pub fn focal_loss(tape: &mut Tape, p: Var, targets: &[bool], alpha: f64, gamma: f64) -> Result<Var> {
    check_len("focal_loss", tape, p, targets.len())?;
    tape.apply(
        Focal {
            alpha,
            gamma,
            targets: Rc::new(targets.to_vec()),
            neg_weights: None,
        },
        &[p],
    )
}

/// Focal loss whose negative terms are scaled per element.
pub fn weighted_focal_loss(
    tape: &mut Tape,
    p: Var,
    targets: &[bool],
    neg_weights: &[f64],
    alpha: f64,
    gamma: f64,
) -> Result<Var> {
    check_len("weighted_focal_loss", tape, p, targets.len())?;
    check_len("weighted_focal_loss", tape, p, neg_weights.len())?;
    tape.apply(
        Focal {
            alpha,
            gamma,
            targets: Rc::new(targets.to_vec()),
            neg_weights: Some(Rc::new(neg_weights.to_vec())),
        },
        &[p],
    )
}

/// Soft Dice of class-major probabilities `[K, ..]` against targets of the same layout.
pub fn dice_loss(tape: &mut Tape, p: Var, targets: &[f64]) -> Result<Var> {
    check_len("dice_loss", tape, p, targets.len())?;
    tape.apply(
        Dice {
            targets: Rc::new(targets.to_vec()),
        },
        &[p],
    )
}

/// Lovász-softmax of class-major probabilities `[K, ..]` over the classes
/// present in `labels` (indices into the class axis).
pub fn lovasz_softmax(tape: &mut Tape, p: Var, labels: &[usize]) -> Result<Var> {
    let k = class_major(tape, p, labels.len(), "lovasz_softmax")?;
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::contract(format!("lovasz_softmax: label {bad} of {k} classes")));
    }
    tape.apply(
        Lovasz {
            labels: Rc::new(labels.to_vec()),
        },
        &[p],
    )
}

pub fn cross_entropy(tape: &mut Tape, logits: Var, labels: &[usize]) -> Result<Var> {
    let k = class_major(tape, logits, labels.len(), "cross_entropy")?;
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::contract(format!("cross_entropy: label {bad} of {k} classes")));
    }
    tape.apply(
        SoftmaxCe {
            labels: Rc::new(labels.to_vec()),
        },
        &[logits],
    )
}

pub fn l1_loss(tape: &mut Tape, x: Var, targets: &[f64]) -> Result<Var> {
    check_len("l1_loss", tape, x, targets.len())?;
    tape.apply(
        L1 {
            targets: Rc::new(targets.to_vec()),
        },
        &[x],
    )
}

/// Focal loss settings shared by the suppression, detection and map losses.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FocalParams {
    pub alpha: f64,
    pub gamma: f64,
}

impl Default for FocalParams {
    fn default() -> Self {
        Self {
            alpha: 0.25,
            gamma: 2.0,
        }
    }
}

/// Dice plus Lovász on the mask classifier scores `[K, X, Y, Z]`, over
/// non-free voxels only.
pub fn cpg_loss(tape: &mut Tape, scores: Var, labels: &[ClassId]) -> Result<Var> {
    let k = class_major(tape, scores, labels.len(), "cpg_loss")?;
    let valid: Vec<usize> = (0..labels.len()).filter(|&v| !labels[v].is_free()).collect();
    if valid.is_empty() {
        return Ok(tape.constant(scalar(0.0)));
    }
    let flat = tape.reshape(scores, &[k, labels.len()])?;
    let picked = tape.gather(flat, valid.iter().map(|&v| vec![(v, 1.0)]).collect())?;
    let idx: Vec<usize> = valid.iter().map(|&v| labels[v].0 as usize - 1).collect();
    let nv = valid.len();
    let mut onehot = vec![0.0; k * nv];
    for (j, &c) in idx.iter().enumerate() {
        onehot[c * nv + j] = 1.0;
    }
    let d = dice_loss(tape, picked, &onehot)?;
    let l = lovasz_softmax(tape, picked, &idx)?;
    tape.add(d, l)
}

/// One task's suppression scores and RoI mask.
#[derive(Clone, Copy, Debug)]
pub struct SuppressionTerm<'a> {
    pub task: Task,
    pub scores: Var,
    pub roi: &'a Mask,
}

/// Sum of per-task focal losses; all three tasks are required.
pub fn suppression_loss(tape: &mut Tape, terms: &[SuppressionTerm], focal: FocalParams) -> Result<Var> {
    for t in Task::ALL {
        if terms.iter().filter(|x| x.task == t).count() != 1 {
            return Err(Error::contract(format!(
                "suppression loss needs exactly one {} term",
                t.as_str()
            )));
        }
    }
    partial_suppression_loss(tape, terms, focal)
}

/// Sum of per-task focal losses over whichever tasks have a suppression gate.
pub fn partial_suppression_loss(tape: &mut Tape, terms: &[SuppressionTerm], focal: FocalParams) -> Result<Var> {
    let mut acc: Option<Var> = None;
    for t in terms {
        if tape.shape(t.scores) != t.roi.shape() {
            return Err(Error::shape("suppression_loss", tape.shape(t.scores), t.roi.shape()));
        }
        let l = focal_loss(tape, t.scores, t.roi.bits(), focal.alpha, focal.gamma)?;
        acc = Some(match acc {
            Some(a) => tape.add(a, l)?,
            None => l,
        });
    }
    Ok(acc.unwrap_or_else(|| tape.constant(scalar(0.0))))
}

/// Heatmap and regression targets for one scene.
#[derive(Clone, Debug, PartialEq)]
pub struct DetTargets {
    /// Positive (center) cells, `[N_Det, X, Y]` flattened.
    pub positive: Vec<bool>,
    /// Gaussian splat, peak 1 at each center cell.
    pub gaussian: Vec<f64>,
    /// Flat BEV cell of each box center, with its regression target.
    pub centers: Vec<(usize, [f64; REG_CHANNELS])>,
}

/// Rasterizes boxes into center targets. The splat width is
/// `max(1, longest side in cells / 6)`.
pub fn det_targets(boxes: &[BevBox], g: &GridGeometry, taxonomy: &ClassTaxonomy) -> Result<DetTargets> {
    let cells = g.bev_cells();
    let n = taxonomy.n_det();
    let mut positive = vec![false; n * cells];
    let mut gaussian = vec![0.0f64; n * cells];
    let mut centers = Vec::new();
    for b in boxes {
        let k = taxonomy
            .det_index(b.class)
            .ok_or_else(|| Error::contract(format!("class {} is not a detection class", b.class.0)))?;
        let Some(((ci, cj), reg)) = encode_box(g, b) else {
            continue;
        };
        let sigma = (b.size[0].max(b.size[1]) / g.cell_size / 6.0).max(1.0);
        for i in 0..g.x {
            for j in 0..g.y {
                let d2 = (i as f64 - ci as f64).powi(2) + (j as f64 - cj as f64).powi(2);
                let v = (-d2 / (2.0 * sigma * sigma)).exp();
                let slot = &mut gaussian[k * cells + g.bev_index(i, j)];
                *slot = slot.max(v);
            }
        }
        positive[k * cells + g.bev_index(ci, cj)] = true;
        centers.push((g.bev_index(ci, cj), reg));
    }
    Ok(DetTargets {
        positive,
        gaussian,
        centers,
    })
}

/// Penalty-reduced focal loss on the heatmaps (negatives scaled by
/// `(1 − gaussian)^4`) plus mean L1 on the regression at center cells.
pub fn det_loss(
    tape: &mut Tape,
    raw: DetectionRaw,
    boxes: &[BevBox],
    g: &GridGeometry,
    taxonomy: &ClassTaxonomy,
    focal: FocalParams,
) -> Result<Var> {
    let t = det_targets(boxes, g, taxonomy)?;
    let neg: Vec<f64> = t.gaussian.iter().map(|&v| (1.0 - v).powi(4)).collect();
    let heat = weighted_focal_loss(tape, raw.heatmaps, &t.positive, &neg, focal.alpha, focal.gamma)?;
    if t.centers.is_empty() {
        return Ok(heat);
    }
    let flat = tape.reshape(raw.regression, &[REG_CHANNELS, g.bev_cells()])?;
    let at = tape.gather(flat, t.centers.iter().map(|&(c, _)| vec![(c, 1.0)]).collect())?;
    let m = t.centers.len();
    let mut targets = vec![0.0; REG_CHANNELS * m];
    for (j, (_, reg)) in t.centers.iter().enumerate() {
        for ch in 0..REG_CHANNELS {
            targets[ch * m + j] = reg[ch];
        }
    }
    let reg = l1_loss(tape, at, &targets)?;
    tape.add(heat, reg)
}

/// Focal loss of map probabilities `[N_Map, X, Y]` against the map layers.
pub fn map_loss(tape: &mut Tape, probabilities: Var, masks: &[Mask], focal: FocalParams) -> Result<Var> {
    let targets: Vec<bool> = masks.iter().flat_map(|m| m.bits().iter().copied()).collect();
    focal_loss(tape, probabilities, &targets, focal.alpha, focal.gamma)
}

/// Cross-entropy plus Lovász-softmax over the `K+1` occupancy classes.
pub fn occ_loss(tape: &mut Tape, logits: Var, labels: &[ClassId], taxonomy: &ClassTaxonomy) -> Result<Var> {
    let idx: Vec<usize> = labels.iter().map(|&c| taxonomy.occ_channel(c)).collect();
    let k = class_major(tape, logits, idx.len(), "occ_loss")?;
    let flat = tape.reshape(logits, &[k, idx.len()])?;
    let ce = cross_entropy(tape, flat, &idx)?;
    let p = tape.softmax(flat, 0)?;
    let lv = lovasz_softmax(tape, p, &idx)?;
    tape.add(ce, lv)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_cpg: f64,
    pub l_sup: f64,
    pub l_det: f64,
    pub l_map: f64,
    pub l_occ: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub const COMPONENTS: [&'static str; 5] = ["l_cpg", "l_sup", "l_det", "l_map", "l_occ"];

    /// Unit-weight sum. A non-finite component aborts with its name.
    pub fn new(l_cpg: f64, l_sup: f64, l_det: f64, l_map: f64, l_occ: f64) -> Result<Self> {
        let parts = [l_cpg, l_sup, l_det, l_map, l_occ];
        for (name, v) in Self::COMPONENTS.iter().zip(parts) {
            if !v.is_finite() {
                return Err(Error::Numerical {
                    component: (*name).into(),
                    detail: format!("loss is {v}"),
                });
            }
        }
        Ok(Self {
            l_cpg,
            l_sup,
            l_det,
            l_map,
            l_occ,
            total: l_cpg + l_sup + l_det + l_map + l_occ,
        })
    }

    pub fn components(&self) -> [f64; 5] {
        [self.l_cpg, self.l_sup, self.l_det, self.l_map, self.l_occ]
    }

    /// Running mean helper: adds `other * w` component-wise.
    pub fn accumulate(&mut self, other: &Self, w: f64) {
        self.l_cpg += other.l_cpg * w;
        self.l_sup += other.l_sup * w;
        self.l_det += other.l_det * w;
        self.l_map += other.l_map * w;
        self.l_occ += other.l_occ * w;
        self.total = self.l_cpg + self.l_sup + self.l_det + self.l_map + self.l_occ;
    }
}

/// Per-component loss variables on a tape.
#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub l_cpg: Var,
    pub l_sup: Var,
    pub l_det: Var,
    pub l_map: Var,
    pub l_occ: Var,
}

/// Adds the five components on the tape and reports their values.
pub fn total_loss(tape: &mut Tape, parts: LossVars) -> Result<(Var, LossBreakdown)> {
    let v = |x: Var| tape.value(x).item();
    let breakdown = LossBreakdown::new(v(parts.l_cpg), v(parts.l_sup), v(parts.l_det), v(parts.l_map), v(parts.l_occ))?;
    let a = tape.add(parts.l_cpg, parts.l_sup)?;
    let b = tape.add(a, parts.l_det)?;
    let c = tape.add(b, parts.l_map)?;
    let total = tape.add(c, parts.l_occ)?;
    Ok((total, breakdown))
}

#[cfg(test)]
mod tests;
