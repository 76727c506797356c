//! Randomized finite-difference checks over every differentiable primitive,
//! every loss and the composite module blocks built from them.
//!
//! Each case draws fresh shapes (extents at most 8) and values per trial.
//! Draws that land within `10·ε` of a non-differentiable point (see
//! [`Tape::kink_margin`]) are redrawn: central differences straddling a kink
//! do not estimate the one-sided derivative the tape reports.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::cpg::{pool_prototypes, ClassMask};
use crate::error::{Error, Result};
use crate::heads::{DetectionRaw, OccupancyDecoder, REG_CHANNELS};
use crate::losses::{self, FocalParams, SuppressionTerm};
use crate::numerics::{
    derive_seed, finite_difference_check, Array, GradCheckConfig, Mask, Mlp, ParamStore, Reduce, Tape, Taps,
    Var,
};
use crate::scene::{BevBox, ClassId, ClassTaxonomy, GridGeometry, Task};
use crate::spa::{self, Contributor, CorrespondenceTable, DecodedBox, Source};
use crate::tsfg::{self, TsfgBranch, TsfgParts};

type LossFn = Box<dyn Fn(&mut Tape, &ParamStore) -> Result<Var>>;

/// One randomized instance: parameters and a scalar loss over them.
pub struct Trial {
    pub store: ParamStore,
    pub loss: LossFn,
}

/// A named family of randomized trials.
#[derive(Clone, Copy)]
pub struct Case {
    pub name: &'static str,
    build: fn(&mut ChaCha8Rng) -> Result<Trial>,
}

impl Case {
    pub fn draw(&self, rng: &mut ChaCha8Rng) -> Result<Trial> {
        (self.build)(rng)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CaseReport {
    pub name: String,
    pub trials: usize,
    pub failures: usize,
    pub redraws: usize,
    pub worst_rel: f64,
    pub worst_abs: f64,
    pub seconds: f64,
}

impl CaseReport {
    pub fn pass(&self) -> bool {
        self.failures == 0
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SuiteReport {
    pub cases: Vec<CaseReport>,
    pub seconds: f64,
}

impl SuiteReport {
    pub fn pass(&self) -> bool {
        self.cases.iter().all(CaseReport::pass)
    }
}

const MAX_REDRAWS: usize = 50;

/// Runs `trials` passing draws of one case.
pub fn run_case(case: &Case, trials: usize, seed: u64, cfg: GradCheckConfig) -> Result<CaseReport> {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, case.name));
    let mut report = CaseReport {
        name: case.name.to_string(),
        trials,
        failures: 0,
        redraws: 0,
        worst_rel: 0.0,
        worst_abs: 0.0,
        seconds: 0.0,
    };
    for _ in 0..trials {
        let mut attempts = 0;
        let mut trial = loop {
            let t = case.draw(&mut rng)?;
            let mut tape = Tape::new();
            (t.loss)(&mut tape, &t.store)?;
            if tape.kink_margin() >= 10.0 * cfg.epsilon {
                break t;
            }
            attempts += 1;
            report.redraws += 1;
            if attempts > MAX_REDRAWS {
                return Err(Error::contract(format!(
                    "{}: no draw away from a kink after {MAX_REDRAWS} attempts",
                    case.name
                )));
            }
        };
        let r = finite_difference_check(&trial.loss, &mut trial.store, cfg)?;
        report.failures += usize::from(!r.pass);
        report.worst_rel = report.worst_rel.max(r.worst_rel());
        report.worst_abs = report.worst_abs.max(r.worst_abs());
    }
    report.seconds = start.elapsed().as_secs_f64();
    Ok(report)
}

/// Runs every case whose name contains `filter` (all when `None`).
pub fn run_suite(trials: usize, seed: u64, cfg: GradCheckConfig, filter: Option<&str>) -> Result<SuiteReport> {
    let start = Instant::now();
    let cases = cases()
        .iter()
        .filter(|c| filter.is_none_or(|f| c.name.contains(f)))
        .map(|c| run_case(c, trials, seed, cfg))
        .collect::<Result<Vec<_>>>()?;
    Ok(SuiteReport {
        cases,
        seconds: start.elapsed().as_secs_f64(),
    })
}

fn dim(rng: &mut ChaCha8Rng, lo: usize, hi: usize) -> usize {
    rng.random_range(lo..=hi)
}

fn dims(rng: &mut ChaCha8Rng, bounds: &[(usize, usize)]) -> Vec<usize> {
    bounds.iter().map(|&(lo, hi)| dim(rng, lo, hi)).collect()
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize]) -> Array {
    Array::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

fn probabilities(rng: &mut ChaCha8Rng, shape: &[usize]) -> Array {
    Array::from_fn(shape, |_| rng.random_range(0.05..0.95))
}

/// Contracts an arbitrary output with fixed random weights so that every
/// output entry contributes to the checked scalar.
fn probe(tape: &mut Tape, out: Var, weights: &Array) -> Result<Var> {
    let w = tape.constant(weights.clone());
    let m = tape.mul(out, w)?;
    tape.sum(m)
}

fn unary(rng: &mut ChaCha8Rng, x: Array, op: fn(&mut Tape, Var) -> Result<Var>) -> Result<Trial> {
    let mut store = ParamStore::new();
    let id = store.add("x", x)?;
    let probe_shape = {
        let mut t = Tape::new();
        let v = t.param(&store, id);
        let out = op(&mut t, v)?;
        t.shape(out).to_vec()
    };
    let w = uniform(rng, &probe_shape);
    Ok(Trial {
        store,
        loss: Box::new(move |t, s| {
            let v = t.param(s, id);
            let out = op(t, v)?;
            probe(t, out, &w)
        }),
    })
}

fn binary(
    rng: &mut ChaCha8Rng,
    a: Array,
    b: Array,
    op: fn(&mut Tape, Var, Var) -> Result<Var>,
) -> Result<Trial> {
    let mut store = ParamStore::new();
    let ia = store.add("a", a)?;
    let ib = store.add("b", b)?;
    let probe_shape = {
        let mut t = Tape::new();
        let (va, vb) = (t.param(&store, ia), t.param(&store, ib));
        let out = op(&mut t, va, vb)?;
        t.shape(out).to_vec()
    };
    let w = uniform(rng, &probe_shape);
    Ok(Trial {
        store,
        loss: Box::new(move |t, s| {
            let (va, vb) = (t.param(s, ia), t.param(s, ib));
            let out = op(t, va, vb)?;
            probe(t, out, &w)
        }),
    })
}

fn same_shape_pair(rng: &mut ChaCha8Rng) -> (Array, Array) {
    let shape = [dim(rng, 1, 8), dim(rng, 1, 8)];
    (uniform(rng, &shape), uniform(rng, &shape))
}

fn conv_trial(rng: &mut ChaCha8Rng, rank: usize, kernel: usize) -> Result<Trial> {
    let (cin, cout) = (dim(rng, 1, 3), dim(rng, 1, 3));
    let spatial: Vec<usize> = (0..rank).map(|_| dim(rng, 1, if rank == 3 { 4 } else { 6 })).collect();
    let mut xs = vec![cin];
    xs.extend(&spatial);
    let mut ws = vec![cout, cin];
    ws.extend(std::iter::repeat_n(kernel, rank));
    let mut store = ParamStore::new();
    let x = store.add("x", uniform(rng, &xs))?;
    let w = store.add("w", uniform(rng, &ws))?;
    let b = store.add("b", uniform(rng, &[cout]))?;
    let mut os = vec![cout];
    os.extend(&spatial);
    let probe_w = uniform(rng, &os);
    Ok(Trial {
        store,
        loss: Box::new(move |t, s| {
            let (xv, wv, bv) = (t.param(s, x), t.param(s, w), t.param(s, b));
            let out = if rank == 2 { t.conv2d(xv, wv, bv)? } else { t.conv3d(xv, wv, bv)? };
            probe(t, out, &probe_w)
        }),
    })
}

fn random_taps(rng: &mut ChaCha8Rng, s: usize, t: usize) -> Taps {
    (0..t)
        .map(|_| {
            (0..dim(rng, 0, 4))
                .map(|_| (rng.random_range(0..s), rng.random_range(-1.0..1.0)))
                .collect()
        })
        .collect()
}

fn random_mask(rng: &mut ChaCha8Rng, shape: &[usize], p: f64) -> Mask {
    Mask::from_fn(shape, |_| rng.random_bool(p))
}

fn loss_trial(store: ParamStore, loss: impl Fn(&mut Tape, &ParamStore) -> Result<Var> + 'static) -> Trial {
    Trial {
        store,
        loss: Box::new(loss),
    }
}

fn small_grid(rng: &mut ChaCha8Rng) -> GridGeometry {
    GridGeometry {
        x: dim(rng, 3, 8),
        y: dim(rng, 3, 8),
        z: dim(rng, 1, 3),
        cell_size: 0.5,
        origin: [0.0; 3],
    }
}

fn random_box(rng: &mut ChaCha8Rng, g: &GridGeometry, class: u16) -> BevBox {
    let (w, h) = (g.x as f64 * g.cell_size, g.y as f64 * g.cell_size);
    BevBox {
        class: ClassId(class),
        center: [rng.random_range(0.0..w), rng.random_range(0.0..h)],
        size: [rng.random_range(0.5..2.0), rng.random_range(0.5..2.0)],
        yaw: rng.random_range(-3.0..3.0),
    }
}

/// Softmax over the leading axis of a parameter, giving class probabilities.
fn class_probs(t: &mut Tape, s: &ParamStore, id: crate::numerics::ParamId) -> Result<Var> {
    let v = t.param(s, id);
    t.softmax(v, 0)
}

/// Every case of the suite.
pub fn cases() -> Vec<Case> {
    macro_rules! case {
        ($name:literal, $f:expr) => {
            Case { name: $name, build: $f }
        };
    }
    vec![
        case!("add", |r| {
            let (a, b) = same_shape_pair(r);
            binary(r, a, b, |t, a, b| t.add(a, b))
        }),
        case!("sub", |r| {
            let (a, b) = same_shape_pair(r);
            binary(r, a, b, |t, a, b| t.sub(a, b))
        }),
        case!("mul", |r| {
            let (a, b) = same_shape_pair(r);
            binary(r, a, b, |t, a, b| t.mul(a, b))
        }),
        case!("scale", |r| {
            let shape = dims(r, &[(1, 8), (1, 8)]);
            let x = uniform(r, &shape);
            unary(r, x, |t, v| t.scale(v, -1.75))
        }),
        case!("sigmoid", |r| {
            let shape = dims(r, &[(1, 8), (1, 8)]);
            let x = Array::from_fn(&shape, |_| r.random_range(-4.0..4.0));
            unary(r, x, |t, v| t.sigmoid(v))
        }),
        case!("relu", |r| {
            let shape = dims(r, &[(1, 8), (1, 8)]);
            let x = uniform(r, &shape);
            unary(r, x, |t, v| t.relu(v))
        }),
        case!("matmul", |r| {
            let (m, k, n) = (dim(r, 1, 8), dim(r, 1, 8), dim(r, 1, 8));
            let (a, b) = (uniform(r, &[m, k]), uniform(r, &[k, n]));
            binary(r, a, b, |t, a, b| t.matmul(a, b))
        }),
        case!("linear", |r| {
            let (n, din, dout) = (dim(r, 1, 8), dim(r, 1, 8), dim(r, 1, 8));
            let mut store = ParamStore::new();
            let x = store.add("x", uniform(r, &[n, din]))?;
            let w = store.add("w", uniform(r, &[dout, din]))?;
            let b = store.add("b", uniform(r, &[dout]))?;
            let pw = uniform(r, &[n, dout]);
            Ok(loss_trial(store, move |t, s| {
                let (xv, wv, bv) = (t.param(s, x), t.param(s, w), t.param(s, b));
                let out = t.linear(xv, wv, bv)?;
                probe(t, out, &pw)
            }))
        }),
        case!("transpose", |r| {
            let shape = dims(r, &[(1, 8), (1, 8)]);
            let x = uniform(r, &shape);
            unary(r, x, |t, v| t.transpose(v))
        }),
        case!("reshape", |r| {
            let (a, b) = (dim(r, 1, 4), dim(r, 1, 4));
            let x = uniform(r, &[a, 2, b]);
            unary(r, x, |t, v| {
                let n = t.value(v).len();
                t.reshape(v, &[2, n / 2])
            })
        }),
        case!("conv2d_k1", |r| conv_trial(r, 2, 1)),
        case!("conv2d_k3", |r| conv_trial(r, 2, 3)),
        case!("conv3d_k1", |r| conv_trial(r, 3, 1)),
        case!("conv3d_k3", |r| conv_trial(r, 3, 3)),
        case!("softmax_axis0", |r| {
            let shape = dims(r, &[(1, 6), (1, 4), (1, 4)]);
            let x = Array::from_fn(&shape, |_| r.random_range(-3.0..3.0));
            unary(r, x, |t, v| t.softmax(v, 0))
        }),
        case!("softmax_axis1", |r| {
            let shape = dims(r, &[(1, 4), (1, 6), (1, 4)]);
            let x = Array::from_fn(&shape, |_| r.random_range(-3.0..3.0));
            unary(r, x, |t, v| t.softmax(v, 1))
        }),
        case!("mean_rows", |r| {
            let shape = dims(r, &[(1, 8), (1, 8)]);
            let x = uniform(r, &shape);
            unary(r, x, |t, v| t.reduce_rows(v, Reduce::Mean))
        }),
        case!("max_rows", |r| {
            let shape = dims(r, &[(1, 8), (1, 8)]);
            let x = uniform(r, &shape);
            unary(r, x, |t, v| t.reduce_rows(v, Reduce::Max))
        }),
        case!("sum", |r| {
            let shape = dims(r, &[(1, 8), (1, 8)]);
            let x = uniform(r, &shape);
            unary(r, x, |t, v| t.sum(v))
        }),
        case!("gather", |r| {
            let (c, s, n) = (dim(r, 1, 6), dim(r, 1, 8), dim(r, 1, 8));
            let taps = random_taps(r, s, n);
            let mut store = ParamStore::new();
            let x = store.add("x", uniform(r, &[c, s]))?;
            let pw = uniform(r, &[c, n]);
            Ok(loss_trial(store, move |t, st| {
                let v = t.param(st, x);
                let out = t.gather(v, taps.clone())?;
                probe(t, out, &pw)
            }))
        }),
        case!("select_rows", |r| {
            let (n, w) = (dim(r, 1, 8), dim(r, 1, 8));
            let rows: Vec<usize> = (0..dim(r, 1, 8)).map(|_| r.random_range(0..n)).collect();
            let mut store = ParamStore::new();
            let x = store.add("x", uniform(r, &[n, w]))?;
            let pw = uniform(r, &[rows.len(), w]);
            Ok(loss_trial(store, move |t, s| {
                let v = t.param(s, x);
                let out = t.select_rows(v, &rows)?;
                probe(t, out, &pw)
            }))
        }),
        case!("concat", |r| {
            let tail = [dim(r, 1, 4), dim(r, 1, 4)];
            let (ra, rb) = (dim(r, 1, 4), dim(r, 1, 4));
            let a = uniform(r, &[ra, tail[0], tail[1]]);
            let b = uniform(r, &[rb, tail[0], tail[1]]);
            binary(r, a, b, |t, a, b| t.concat(&[a, b]))
        }),
        case!("scale_channels", |r| {
            let c = dim(r, 1, 6);
            let (x, y) = (dim(r, 1, 6), dim(r, 1, 6));
            let a = uniform(r, &[c, x, y]);
            let b = uniform(r, &[c]);
            binary(r, a, b, |t, a, b| t.scale_channels(a, b))
        }),
        case!("gate_cells", |r| {
            let cells = [dim(r, 1, 6), dim(r, 1, 6)];
            let c = dim(r, 1, 6);
            let a = uniform(r, &[c, cells[0], cells[1]]);
            let b = uniform(r, &cells);
            binary(r, a, b, |t, a, b| t.gate_cells(a, b))
        }),
        case!("collapse_height", |r| {
            let shape = dims(r, &[(1, 4), (1, 5), (1, 5), (1, 4)]);
            let x = uniform(r, &shape);
            unary(r, x, |t, v| t.collapse_height(v))
        }),
        case!("masked_mean", |r| {
            let (c, s) = (dim(r, 1, 8), dim(r, 1, 8));
            let idx: Vec<usize> = (0..s).filter(|_| r.random_bool(0.5)).collect();
            let mut store = ParamStore::new();
            let x = store.add("x", uniform(r, &[c, s]))?;
            let pw = uniform(r, &[c]);
            Ok(loss_trial(store, move |t, st| {
                let v = t.param(st, x);
                let out = t.masked_mean(v, &idx)?;
                probe(t, out, &pw)
            }))
        }),
        case!("focal_loss", |r| {
            let shape = [dim(r, 1, 6), dim(r, 1, 8)];
            let n = shape[0] * shape[1];
            let targets: Vec<bool> = (0..n).map(|_| r.random_bool(0.3)).collect();
            let mut store = ParamStore::new();
            let p = store.add("p", probabilities(r, &shape))?;
            Ok(loss_trial(store, move |t, s| {
                let v = t.param(s, p);
                losses::focal_loss(t, v, &targets, 0.25, 2.0)
            }))
        }),
        case!("weighted_focal_loss", |r| {
            let n = dim(r, 1, 8) * dim(r, 1, 8);
            let targets: Vec<bool> = (0..n).map(|_| r.random_bool(0.2)).collect();
            let neg: Vec<f64> = (0..n).map(|_| r.random_range(0.0..1.0)).collect();
            let mut store = ParamStore::new();
            let p = store.add("p", probabilities(r, &[n]))?;
            Ok(loss_trial(store, move |t, s| {
                let v = t.param(s, p);
                losses::weighted_focal_loss(t, v, &targets, &neg, 0.25, 2.0)
            }))
        }),
        case!("dice_loss", |r| {
            let (k, n) = (dim(r, 1, 5), dim(r, 1, 8));
            let targets: Vec<f64> = (0..k * n).map(|_| f64::from(u8::from(r.random_bool(0.4)))).collect();
            let mut store = ParamStore::new();
            let p = store.add("p", probabilities(r, &[k, n]))?;
            Ok(loss_trial(store, move |t, s| {
                let v = t.param(s, p);
                losses::dice_loss(t, v, &targets)
            }))
        }),
        case!("lovasz_softmax", |r| {
            let (k, n) = (dim(r, 2, 5), dim(r, 1, 8));
            let labels: Vec<usize> = (0..n).map(|_| r.random_range(0..k)).collect();
            let mut store = ParamStore::new();
            let logits = store.add("logits", uniform(r, &[k, n]))?;
            Ok(loss_trial(store, move |t, s| {
                let p = class_probs(t, s, logits)?;
                losses::lovasz_softmax(t, p, &labels)
            }))
        }),
        case!("cross_entropy", |r| {
            let (k, n) = (dim(r, 2, 6), dim(r, 1, 8));
            let labels: Vec<usize> = (0..n).map(|_| r.random_range(0..k)).collect();
            let mut store = ParamStore::new();
            let x = store.add("logits", Array::from_fn(&[k, n], |_| r.random_range(-3.0..3.0)))?;
            Ok(loss_trial(store, move |t, s| {
                let v = t.param(s, x);
                losses::cross_entropy(t, v, &labels)
            }))
        }),
        case!("l1_loss", |r| {
            let n = dim(r, 1, 8) * dim(r, 1, 4);
            let targets: Vec<f64> = (0..n).map(|_| r.random_range(-1.0..1.0)).collect();
            let mut store = ParamStore::new();
            let x = store.add("x", uniform(r, &[n]))?;
            Ok(loss_trial(store, move |t, s| {
                let v = t.param(s, x);
                losses::l1_loss(t, v, &targets)
            }))
        }),
        case!("cpg_loss", |r| {
            let (k, x, y, z) = (dim(r, 2, 4), dim(r, 1, 3), dim(r, 1, 3), dim(r, 1, 2));
            let labels: Vec<ClassId> = (0..x * y * z).map(|_| ClassId(r.random_range(0..=k as u16))).collect();
            let mut store = ParamStore::new();
            let logits = store.add("logits", uniform(r, &[k, x, y, z]))?;
            Ok(loss_trial(store, move |t, s| {
                let p = class_probs(t, s, logits)?;
                losses::cpg_loss(t, p, &labels)
            }))
        }),
        case!("suppression_loss", |r| {
            let g = small_grid(r);
            let rois = [
                random_mask(r, &g.bev_shape(), 0.3),
                random_mask(r, &g.bev_shape(), 0.5),
                random_mask(r, &g.voxel_shape(), 0.4),
            ];
            let mut store = ParamStore::new();
            let ids = [
                store.add("s_det", uniform(r, &g.bev_shape()))?,
                store.add("s_map", uniform(r, &g.bev_shape()))?,
                store.add("s_occ", uniform(r, &g.voxel_shape()))?,
            ];
            Ok(loss_trial(store, move |t, s| {
                let mut terms = Vec::new();
                for ((task, id), roi) in Task::ALL.iter().zip(ids).zip(&rois) {
                    let v = t.param(s, id);
                    let scores = t.sigmoid(v)?;
                    terms.push(SuppressionTerm { task: *task, scores, roi });
                }
                losses::suppression_loss(t, &terms, FocalParams::default())
            }))
        }),
        case!("det_loss", |r| {
            let tax = ClassTaxonomy::desk();
            let g = small_grid(r);
            let boxes: Vec<BevBox> = (0..dim(r, 0, 3))
                .map(|_| {
                    let c = tax.foreground[r.random_range(0..tax.n_fg())];
                    let mut b = random_box(r, &g, c.0);
                    b.size = [r.random_range(0.6..2.0), r.random_range(0.6..2.0)];
                    b
                })
                .collect();
            let mut store = ParamStore::new();
            let heat = store.add("heat", uniform(r, &[tax.n_det(), g.x, g.y]))?;
            let reg = store.add("reg", uniform(r, &[REG_CHANNELS, g.x, g.y]))?;
            Ok(loss_trial(store, move |t, s| {
                let h = t.param(s, heat);
                let heatmaps = t.sigmoid(h)?;
                let regression = t.param(s, reg);
                let raw = DetectionRaw { heatmaps, regression };
                losses::det_loss(t, raw, &boxes, &g, &tax, FocalParams::default())
            }))
        }),
        case!("map_loss", |r| {
            let n = dim(r, 1, 4);
            let shape = [dim(r, 1, 6), dim(r, 1, 6)];
            let masks: Vec<Mask> = (0..n).map(|_| random_mask(r, &shape, 0.4)).collect();
            let mut store = ParamStore::new();
            let x = store.add("x", uniform(r, &[n, shape[0], shape[1]]))?;
            Ok(loss_trial(store, move |t, s| {
                let v = t.param(s, x);
                let p = t.sigmoid(v)?;
                losses::map_loss(t, p, &masks, FocalParams::default())
            }))
        }),
        case!("occ_loss", |r| {
            let tax = ClassTaxonomy::desk();
            let (x, y, z) = (dim(r, 1, 2), dim(r, 1, 3), dim(r, 1, 2));
            let labels: Vec<ClassId> = (0..x * y * z).map(|_| ClassId(r.random_range(0..=8))).collect();
            let mut store = ParamStore::new();
            let logits = store.add("logits", uniform(r, &[tax.k() + 1, x, y, z]))?;
            Ok(loss_trial(store, move |t, s| {
                let v = t.param(s, logits);
                losses::occ_loss(t, v, &labels, &tax)
            }))
        }),
        case!("total_loss", |r| {
            let mut store = ParamStore::new();
            let ids: Vec<_> = (0..5)
                .map(|i| store.add(format!("l{i}"), uniform(r, &[1])))
                .collect::<Result<_>>()?;
            Ok(loss_trial(store, move |t, s| {
                let v: Vec<Var> = ids.iter().map(|&id| t.param(s, id)).collect();
                let parts = losses::LossVars {
                    l_cpg: v[0],
                    l_sup: v[1],
                    l_det: v[2],
                    l_map: v[3],
                    l_occ: v[4],
                };
                Ok(losses::total_loss(t, parts)?.0)
            }))
        }),
        case!("pool_prototypes", |r| {
            let (c, k) = (dim(r, 1, 6), dim(r, 1, 5));
            let spatial = [dim(r, 1, 4), dim(r, 1, 4), dim(r, 1, 3)];
            let masks: Vec<ClassMask> = (0..k)
                .map(|i| ClassMask {
                    class: ClassId(i as u16 + 1),
                    mask: random_mask(r, &spatial, 0.3),
                })
                .collect();
            let mut store = ParamStore::new();
            let x = store.add("features", uniform(r, &[c, spatial[0], spatial[1], spatial[2]]))?;
            let pw = uniform(r, &[k, c]);
            Ok(loss_trial(store, move |t, s| {
                let v = t.param(s, x);
                let out = pool_prototypes(t, v, &masks)?;
                probe(t, out, &pw)
            }))
        }),
        case!("prototype_wise", |r| {
            let (c, n) = (dim(r, 1, 6), dim(r, 1, 5));
            let spatial = [dim(r, 1, 5), dim(r, 1, 5)];
            let mut store = ParamStore::new();
            let mlp = Mlp::new(&mut store, "mlp", c, c, c, r.random())?;
            let f = store.add("features", uniform(r, &[c, spatial[0], spatial[1]]))?;
            let g = store.add("group", uniform(r, &[n, c]))?;
            let pw = uniform(r, &[n, spatial[0], spatial[1]]);
            Ok(loss_trial(store, move |t, s| {
                let (fv, gv) = (t.param(s, f), t.param(s, g));
                let out = tsfg::prototype_wise(t, s, &mlp, fv, gv)?;
                probe(t, out, &pw)
            }))
        }),
        case!("prototype_aware", |r| {
            let (c, n) = (dim(r, 1, 6), dim(r, 1, 5));
            let spatial = [dim(r, 1, 4), dim(r, 1, 4), dim(r, 1, 3)];
            let mut store = ParamStore::new();
            let mlp = Mlp::new(&mut store, "mlp", 2 * c, c, c, r.random())?;
            let f = store.add("features", uniform(r, &[c, spatial[0], spatial[1], spatial[2]]))?;
            let g = store.add("group", uniform(r, &[n, c]))?;
            let pw = uniform(r, &[c, spatial[0], spatial[1], spatial[2]]);
            Ok(loss_trial(store, move |t, s| {
                let (fv, gv) = (t.param(s, f), t.param(s, g));
                let (out, _) = tsfg::prototype_aware(t, s, &mlp, fv, gv)?;
                probe(t, out, &pw)
            }))
        }),
        case!("tsfg_branch", |r| {
            let (c, n) = (dim(r, 1, 4), dim(r, 1, 4));
            let task = if r.random_bool(0.5) { Task::Map } else { Task::Occ };
            let spatial: Vec<usize> = if task.is_bev() {
                vec![dim(r, 1, 5), dim(r, 1, 5)]
            } else {
                vec![dim(r, 1, 3), dim(r, 1, 3), dim(r, 1, 2)]
            };
            let mut fs = vec![c];
            fs.extend(&spatial);
            let mut store = ParamStore::new();
            let branch = TsfgBranch::new(&mut store, task, TsfgParts::ALL, c, n, r.random())?;
            let f = store.add("features", uniform(r, &fs))?;
            let g = store.add("group", uniform(r, &[n, c]))?;
            let pw = uniform(r, &fs);
            Ok(loss_trial(store, move |t, s| {
                let (fv, gv) = (t.param(s, f), t.param(s, g));
                let out = branch.forward(t, s, fv, Some(gv))?;
                probe(t, out.task_specific, &pw)
            }))
        }),
        case!("roi_align_bev", |r| {
            let g = small_grid(r);
            let c = dim(r, 1, 4);
            let bx = random_box(r, &g, 1);
            let (h, w) = (dim(r, 1, 4), dim(r, 1, 4));
            let mut store = ParamStore::new();
            let f = store.add("features", uniform(r, &[c, g.x, g.y]))?;
            let pw = uniform(r, &[c, h, w]);
            Ok(loss_trial(store, move |t, s| {
                let v = t.param(s, f);
                let out = spa::roi_align_bev(t, v, &g, &bx, h, w)?;
                probe(t, out, &pw)
            }))
        }),
        case!("detection_prototypes", |r| {
            let tax = ClassTaxonomy::desk();
            let g = small_grid(r);
            let c = dim(r, 1, 4);
            let boxes: Vec<DecodedBox> = (0..dim(r, 0, 5))
                .map(|_| {
                    let class = tax.foreground[r.random_range(0..tax.n_fg())].0;
                    DecodedBox {
                        bev: random_box(r, &g, class),
                        score: r.random_range(0.1..1.0),
                    }
                })
                .collect();
            let mut store = ParamStore::new();
            let f = store.add("features", uniform(r, &[c, g.x, g.y]))?;
            let pw = uniform(r, &[tax.n_det(), c]);
            Ok(loss_trial(store, move |t, s| {
                let v = t.param(s, f);
                let out = spa::detection_prototypes(t, v, &g, &tax, &boxes, 3)?;
                probe(t, out, &pw)
            }))
        }),
        case!("map_prototypes", |r| {
            let g = small_grid(r);
            let (c, n) = (dim(r, 1, 4), dim(r, 1, 4));
            let probs = Array::from_fn(&[n, g.x, g.y], |_| r.random_range(0.0..1.0));
            let mut store = ParamStore::new();
            let f = store.add("features", uniform(r, &[c, g.x, g.y]))?;
            let pw = uniform(r, &[n, c]);
            Ok(loss_trial(store, move |t, s| {
                let v = t.param(s, f);
                let out = spa::map_prototypes(t, v, &g, &probs, 0.5)?;
                probe(t, out, &pw)
            }))
        }),
        case!("aggregate", |r| {
            let (c, members, n_det, n_map) = (dim(r, 1, 6), dim(r, 1, 8), dim(r, 1, 4), dim(r, 1, 4));
            let table = CorrespondenceTable {
                members: (0..members).map(|i| ClassId(i as u16 + 1)).collect(),
                contributors: (0..members)
                    .map(|_| {
                        (0..dim(r, 0, 3))
                            .map(|_| {
                                if r.random_bool(0.5) {
                                    Contributor { source: Source::Det, index: r.random_range(0..n_det) }
                                } else {
                                    Contributor { source: Source::Map, index: r.random_range(0..n_map) }
                                }
                            })
                            .collect()
                    })
                    .collect(),
            };
            let mut store = ParamStore::new();
            let occ = store.add("occ", uniform(r, &[members, c]))?;
            let det = store.add("det", uniform(r, &[n_det, c]))?;
            let map = store.add("map", uniform(r, &[n_map, c]))?;
            let pw = uniform(r, &[members, c]);
            Ok(loss_trial(store, move |t, s| {
                let (o, d, m) = (t.param(s, occ), t.param(s, det), t.param(s, map));
                let out = spa::aggregate(t, o, d, m, &table)?;
                probe(t, out, &pw)
            }))
        }),
        case!("occupancy_decoder", |r| {
            let (c, k) = (dim(r, 1, 4), dim(r, 1, 5));
            let spatial = [dim(r, 1, 3), dim(r, 1, 3), dim(r, 1, 2)];
            let mut store = ParamStore::new();
            let dec = OccupancyDecoder::new(&mut store, c, r.random())?;
            let f = store.add("features", uniform(r, &[c, spatial[0], spatial[1], spatial[2]]))?;
            let p = store.add("prototypes", uniform(r, &[k, c]))?;
            let pw = uniform(r, &[k + 1, spatial[0], spatial[1], spatial[2]]);
            Ok(loss_trial(store, move |t, s| {
                let (fv, pv) = (t.param(s, f), t.param(s, p));
                let out = dec.predict(t, s, fv, pv)?;
                probe(t, out, &pw)
            }))
        }),
    ]
}
