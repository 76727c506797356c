use super::*;
use crate::numerics::{finite_difference_check, GradCheckConfig, ParamStore};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn probs(shape: &[usize], seed: u64) -> Array {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Array::from_fn(shape, |_| rng.random_range(0.05..0.95))
}

fn softmax_cols(x: &Array) -> Array {
    let k = x.shape()[0];
    let n = x.len() / k;
    let mut out = x.clone();
    for v in 0..n {
        let z: f64 = (0..k).map(|c| x.data()[c * n + v].exp()).sum();
        for c in 0..k {
            out.data_mut()[c * n + v] = x.data()[c * n + v].exp() / z;
        }
    }
    out
}

fn value(f: impl FnOnce(&mut Tape) -> Result<Var>) -> f64 {
    let mut tape = Tape::new();
    let v = f(&mut tape).unwrap();
    tape.value(v).item()
}

#[test]
fn focal_closed_forms() {
    let l = value(|t| {
        let p = t.input(Array::full(&[5], 1.0 - EPS));
        focal_loss(t, p, &[true; 5], 0.25, 2.0)
    });
    assert!(l <= 1e-5);
    let l = value(|t| {
        let p = t.input(Array::scalar(0.5));
        focal_loss(t, p, &[true], 0.25, 2.0)
    });
    assert!((l - 0.25 * 0.25 * 2f64.ln()).abs() < 1e-15);
    assert!((l - 0.043321).abs() < 1e-6);
    let mut tape = Tape::new();
    let p = tape.input(Array::scalar(0.5));
    assert!(matches!(focal_loss(&mut tape, p, &[true, false], 0.25, 2.0), Err(Error::Contract(_))));
}

#[test]
fn dice_closed_forms() {
    let t: Vec<f64> = (0..12).map(|i| (i % 3 == 0) as u8 as f64).collect();
    let l = value(|tp| {
        let p = tp.input(Array::new(vec![2, 6], t.clone()).unwrap());
        dice_loss(tp, p, &t)
    });
    assert_eq!(l, 0.0);
    let l = value(|tp| {
        let p = tp.input(Array::zeros(&[1, 6]));
        dice_loss(tp, p, &[0.0; 6])
    });
    assert_eq!(l, 0.0);
    let l = value(|tp| {
        let p = tp.input(Array::full(&[1, 7], 1.0));
        dice_loss(tp, p, &[0.0; 7])
    });
    assert!((l - (1.0 - 1.0 / 8.0)).abs() < 1e-15);
}

#[test]
fn lovasz_hand_cases() {
    let l = value(|t| {
        let p = t.input(Array::new(vec![3, 4], vec![1., 0., 0., 1., 0., 1., 0., 0., 0., 0., 1., 0.]).unwrap());
        lovasz_softmax(t, p, &[0, 1, 2, 0])
    });
    assert_eq!(l, 0.0);
    let l = value(|t| {
        let p = t.input(Array::new(vec![2, 1], vec![0.4, 0.6]).unwrap());
        lovasz_softmax(t, p, &[1])
    });
    assert!((l - 0.4).abs() < 1e-15);
}

/// Lovász extension of the Jaccard loss evaluated from explicit
/// misprediction sets: `Δ(A) = |A| / |gt ∪ A|` on each sorted prefix `A`.
fn lovasz_oracle(p: &Array, labels: &[usize]) -> f64 {
    let k = p.shape()[0];
    let n = labels.len();
    let mut per_class = Vec::new();
    for c in 0..k {
        let gt: Vec<usize> = (0..n).filter(|&v| labels[v] == c).collect();
        if gt.is_empty() {
            continue;
        }
        let err: Vec<f64> = (0..n)
            .map(|v| {
                let pv = p.get(&[c, v]);
                if labels[v] == c {
                    1.0 - pv
                } else {
                    pv
                }
            })
            .collect();
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| err[b].partial_cmp(&err[a]).unwrap());
        let delta = |prefix: &[usize]| {
            let mut union: Vec<usize> = gt.clone();
            for &v in prefix {
                if !union.contains(&v) {
                    union.push(v);
                }
            }
            prefix.len() as f64 / union.len() as f64
        };
        let mut loss = 0.0;
        for i in 0..n {
            let coef = delta(&order[..=i]) - if i == 0 { 0.0 } else { delta(&order[..i]) };
            loss += err[order[i]] * coef;
        }
        per_class.push(loss);
    }
    per_class.iter().sum::<f64>() / per_class.len() as f64
}

#[test]
fn lovasz_matches_set_oracle() {
    for seed in 0..50 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = softmax_cols(&Array::from_fn(&[3, 6], |_| rng.random_range(-2.0..2.0)));
        let labels: Vec<usize> = (0..6).map(|_| rng.random_range(0..3)).collect();
        let got = value(|t| {
            let x = t.input(p.clone());
            lovasz_softmax(t, x, &labels)
        });
        assert!((got - lovasz_oracle(&p, &labels)).abs() < 1e-12, "seed {seed}");
    }
}

#[test]
fn cross_entropy_uniform() {
    let l = value(|t| {
        let x = t.input(Array::zeros(&[9, 10]));
        cross_entropy(t, x, &[0, 1, 2, 3, 4, 5, 6, 7, 8, 0])
    });
    assert!((l - 9f64.ln()).abs() < 1e-12);
    assert!((l - 2.1972).abs() < 1e-4);
}

#[test]
fn occ_loss_cases() {
    let tax = ClassTaxonomy::desk();
    let labels: Vec<ClassId> = (0..18).map(|v| ClassId((v % 9) as u16)).collect();
    let idx: Vec<usize> = labels.iter().map(|&c| tax.occ_channel(c)).collect();
    let margin = Array::from_fn(&[9, 3, 3, 2], |i| if idx[i % 18] == i / 18 { 20.0 } else { 0.0 });
    let l = value(|t| {
        let x = t.input(margin);
        occ_loss(t, x, &labels, &tax)
    });
    assert!(l <= 1e-4);

    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let logits = Array::from_fn(&[9, 3, 3, 2], |_| rng.random_range(-1.0..1.0));
    let got = value(|t| {
        let x = t.input(logits.clone());
        occ_loss(t, x, &labels, &tax)
    });
    let flat = logits.clone().reshape(&[9, 18]).unwrap();
    let p = softmax_cols(&flat);
    let ce: f64 = (0..18).map(|v| -p.get(&[idx[v], v]).ln()).sum::<f64>() / 18.0;
    assert!((got - ce - lovasz_oracle(&p, &idx)).abs() < 1e-12);
}

#[test]
fn cpg_loss_cases() {
    let labels: Vec<ClassId> = (0..8).map(|v| ClassId((v % 4) as u16)).collect();
    let perfect = Array::from_fn(&[3, 2, 2, 2], |i| (labels[i % 8].0 as usize == i / 8 + 1) as u8 as f64);
    // free voxels get any distribution
    let mut perfect = perfect;
    for v in [0, 4] {
        perfect.data_mut()[v] = 1.0;
    }
    let l = value(|t| {
        let x = t.input(perfect);
        cpg_loss(t, x, &labels)
    });
    assert_eq!(l, 0.0);
    let l = value(|t| {
        let x = t.input(Array::full(&[3, 2, 2, 2], 1.0 / 3.0));
        cpg_loss(t, x, &[ClassId::FREE; 8])
    });
    assert_eq!(l, 0.0);

    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let s = softmax_cols(&Array::from_fn(&[3, 8], |_| rng.random_range(-1.0..1.0)));
    let got = value(|t| {
        let x = t.input(s.clone().reshape(&[3, 2, 2, 2]).unwrap());
        cpg_loss(t, x, &labels)
    });
    let valid: Vec<usize> = (0..8).filter(|&v| !labels[v].is_free()).collect();
    let sub = Array::from_fn(&[3, valid.len()], |i| s.get(&[i / valid.len(), valid[i % valid.len()]]));
    let idx: Vec<usize> = valid.iter().map(|&v| labels[v].0 as usize - 1).collect();
    let mut dice = 0.0;
    for c in 0..3 {
        let (mut pt, mut ps, mut ts) = (0.0, 0.0, 0.0);
        for (j, &l) in idx.iter().enumerate() {
            let t = (l == c) as u8 as f64;
            pt += sub.get(&[c, j]) * t;
            ps += sub.get(&[c, j]);
            ts += t;
        }
        dice += 1.0 - (2.0 * pt + 1.0) / (ps + ts + 1.0);
    }
    dice /= 3.0;
    assert!((got - dice - lovasz_oracle(&sub, &idx)).abs() < 1e-12);
}

#[test]
fn suppression_cases() {
    let masks: Vec<Mask> = [(4usize, 4usize), (4, 4)]
        .iter()
        .enumerate()
        .map(|(s, &(x, y))| Mask::from_fn(&[x, y], |i| (i + s) % 3 == 0))
        .chain([Mask::from_fn(&[4, 4, 2], |i| i % 5 == 0)])
        .collect();
    let tasks = [Task::Det, Task::Map, Task::Occ];
    let run = |tape: &mut Tape, f: &dyn Fn(&Mask) -> Array, drop: Option<usize>| {
        let terms: Vec<SuppressionTerm> = tasks
            .iter()
            .zip(&masks)
            .enumerate()
            .filter(|(i, _)| Some(*i) != drop)
            .map(|(_, (&task, roi))| SuppressionTerm {
                task,
                scores: tape.input(f(roi)),
                roi,
            })
            .collect();
        suppression_loss(tape, &terms, FocalParams::default())
    };
    let mut tape = Tape::new();
    let exact = |m: &Mask| Array::from_fn(m.shape(), |i| if m.bits()[i] { 1.0 - EPS } else { EPS });
    let l = run(&mut tape, &exact, None).unwrap();
    assert!(tape.value(l).item() <= 3e-5);

    let half = |m: &Mask| Array::full(m.shape(), 0.5);
    let l = run(&mut tape, &half, None).unwrap();
    let want: f64 = masks
        .iter()
        .map(|m| {
            let d = m.count() as f64 / m.len() as f64;
            0.25 * (d * 0.25 * 2f64.ln() + (1.0 - d) * 0.75 * 2f64.ln())
        })
        .sum();
    assert!((tape.value(l).item() - want).abs() < 1e-12);
    assert!(matches!(run(&mut tape, &half, Some(1)), Err(Error::Contract(_))));
}

fn grid() -> GridGeometry {
    GridGeometry {
        x: 8,
        y: 8,
        z: 2,
        cell_size: 0.5,
        origin: [0.0; 3],
    }
}

#[test]
fn det_loss_cases() {
    let g = grid();
    let tax = ClassTaxonomy::desk();
    let mut tape = Tape::new();
    let raw = DetectionRaw {
        heatmaps: tape.input(Array::full(&[4, 8, 8], EPS)),
        regression: tape.input(Array::zeros(&[6, 8, 8])),
    };
    let l = det_loss(&mut tape, raw, &[], &g, &tax, FocalParams::default()).unwrap();
    assert!(tape.value(l).item() < 1e-12);

    let b = BevBox {
        class: ClassId(2),
        center: [1.6, 2.4],
        size: [1.5, 0.8],
        yaw: 0.3,
    };
    let t = det_targets(&[b], &g, &tax).unwrap();
    let ((ci, cj), reg) = encode_box(&g, &b).unwrap();
    assert_eq!(t.centers, vec![(ci * 8 + cj, reg)]);
    assert_eq!(t.positive.iter().filter(|&&p| p).count(), 1);
    let perfect_heat = Array::from_fn(&[4, 8, 8], |i| if t.positive[i] { 1.0 - EPS } else { EPS });
    let perfect_reg = Array::from_fn(&[6, 8, 8], |i| if i % 64 == ci * 8 + cj { reg[i / 64] } else { 0.3 });
    let raw = DetectionRaw {
        heatmaps: tape.input(perfect_heat),
        regression: tape.input(perfect_reg),
    };
    let l = det_loss(&mut tape, raw, &[b], &g, &tax, FocalParams::default()).unwrap();
    assert!(tape.value(l).item() <= 1e-5);

    // zero-weight head: p = 0.5 everywhere, regression 0
    let raw = DetectionRaw {
        heatmaps: tape.input(Array::full(&[4, 8, 8], 0.5)),
        regression: tape.input(Array::zeros(&[6, 8, 8])),
    };
    let l = det_loss(&mut tape, raw, &[b], &g, &tax, FocalParams::default()).unwrap();
    let ln2 = 2f64.ln();
    let sigma = (1.5f64 / 0.5 / 6.0).max(1.0);
    let mut heat = 0.0;
    for k in 0..4 {
        for i in 0..8 {
            for j in 0..8 {
                if k == 1 && (i, j) == (ci, cj) {
                    heat += 0.25 * 0.25 * ln2;
                } else {
                    let gv = if k == 1 {
                        (-(((i as f64 - ci as f64).powi(2) + (j as f64 - cj as f64).powi(2)) / (2.0 * sigma * sigma))).exp()
                    } else {
                        0.0
                    };
                    heat += 0.75 * (1.0 - gv).powi(4) * 0.25 * ln2;
                }
            }
        }
    }
    let l1 = reg.iter().map(|v| v.abs()).sum::<f64>() / 6.0;
    assert!((tape.value(l).item() - heat / 256.0 - l1).abs() < 1e-12);
}

#[test]
fn map_loss_cases() {
    let masks = vec![Mask::from_fn(&[4, 4], |i| i < 6), Mask::empty(&[4, 4])];
    let mut tape = Tape::new();
    let perfect = Array::from_fn(&[2, 4, 4], |i| if i < 6 { 1.0 - EPS } else { EPS });
    let p = tape.input(perfect);
    let l = map_loss(&mut tape, p, &masks, FocalParams::default()).unwrap();
    assert!(tape.value(l).item() <= 1e-5);
    let p = tape.input(Array::full(&[2, 4, 4], 0.5));
    let l = map_loss(&mut tape, p, &masks, FocalParams::default()).unwrap();
    let d = 6.0 / 32.0;
    let want = 0.25 * 2f64.ln() * (d * 0.25 + (1.0 - d) * 0.75);
    assert!((tape.value(l).item() - want).abs() < 1e-12);
    let empty = vec![Mask::empty(&[4, 4]), Mask::empty(&[4, 4])];
    let p = tape.input(Array::full(&[2, 4, 4], 0.3));
    let l = map_loss(&mut tape, p, &empty, FocalParams::default()).unwrap();
    let want = -0.75 * 0.09 * 0.7f64.ln();
    assert!((tape.value(l).item() - want).abs() < 1e-12);
}

#[test]
fn total_loss_sums_and_flags_nan() {
    let mut tape = Tape::new();
    let vars: Vec<Var> = (1..=5).map(|v| tape.input(Array::scalar(v as f64))).collect();
    let parts = LossVars {
        l_cpg: vars[0],
        l_sup: vars[1],
        l_det: vars[2],
        l_map: vars[3],
        l_occ: vars[4],
    };
    let (t, b) = total_loss(&mut tape, parts).unwrap();
    assert_eq!(tape.value(t).item(), 15.0);
    assert_eq!(b.total, 15.0);
    assert_eq!(LossBreakdown::new(0.0, 0.0, 0.0, 0.0, 0.0).unwrap().total, 0.0);
    match LossBreakdown::new(0.0, 0.0, f64::NAN, 0.0, 0.0) {
        Err(Error::Numerical { component, .. }) => assert_eq!(component, "l_det"),
        other => panic!("{other:?}"),
    }
}

#[test]
fn total_gradient_is_sum_of_component_gradients() {
    let mut store = ParamStore::new();
    let w = store.add("w", probs(&[2, 6], 1)).unwrap();
    let build = |tape: &mut Tape, store: &ParamStore, only: Option<usize>| -> Var {
        let x = tape.param(store, w);
        let s = tape.softmax(x, 0).unwrap();
        let comps = [
            dice_loss(tape, s, &[1., 0., 1., 0., 1., 0., 0., 1., 0., 1., 0., 1.]).unwrap(),
            lovasz_softmax(tape, s, &[0, 1, 0, 1, 0, 1]).unwrap(),
            cross_entropy(tape, x, &[0, 0, 1, 1, 0, 1]).unwrap(),
            focal_loss(tape, s, &[true, false, true, false, false, true, false, true, true, false, true, false], 0.25, 2.0).unwrap(),
            l1_loss(tape, x, &[0.1; 12]).unwrap(),
        ];
        match only {
            Some(i) => comps[i],
            None => {
                let parts = LossVars {
                    l_cpg: comps[0],
                    l_sup: comps[1],
                    l_det: comps[2],
                    l_map: comps[3],
                    l_occ: comps[4],
                };
                total_loss(tape, parts).unwrap().0
            }
        }
    };
    let mut sum = Array::zeros(&[2, 6]);
    for i in 0..5 {
        store.zero_grad();
        let mut tape = Tape::new();
        let l = build(&mut tape, &store, Some(i));
        tape.backward_scalar(l, &mut store).unwrap();
        sum.add_assign(store.grad(w));
    }
    store.zero_grad();
    let mut tape = Tape::new();
    let l = build(&mut tape, &store, None);
    tape.backward_scalar(l, &mut store).unwrap();
    for (a, b) in store.grad(w).data().iter().zip(sum.data()) {
        assert!((a - b).abs() < 1e-12);
    }
}

fn check(build: impl Fn(&mut Tape, &ParamStore) -> Result<Var>, store: &mut ParamStore) {
    let r = finite_difference_check(build, store, GradCheckConfig::default()).unwrap();
    assert!(r.pass, "{r:?}");
}

#[test]
fn primitives_pass_gradcheck() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let targets: Vec<bool> = (0..12).map(|_| rng.random_bool(0.4)).collect();
    let soft: Vec<f64> = (0..12).map(|_| rng.random_range(0.0..1.0)).collect();
    let labels: Vec<usize> = (0..4).map(|_| rng.random_range(0..3)).collect();

    let mut store = ParamStore::new();
    let p = store.add("p", probs(&[3, 4], 5)).unwrap();
    check(|t, s| {
        let x = t.param(s, p);
        focal_loss(t, x, &targets, 0.25, 2.0)
    }, &mut store);
    check(|t, s| {
        let x = t.param(s, p);
        weighted_focal_loss(t, x, &targets, &soft, 0.25, 2.0)
    }, &mut store);
    check(|t, s| {
        let x = t.param(s, p);
        dice_loss(t, x, &soft)
    }, &mut store);
    check(|t, s| {
        let x = t.param(s, p);
        let sm = t.softmax(x, 0)?;
        lovasz_softmax(t, sm, &labels)
    }, &mut store);
    check(|t, s| {
        let x = t.param(s, p);
        cross_entropy(t, x, &labels)
    }, &mut store);
    check(|t, s| {
        let x = t.param(s, p);
        l1_loss(t, x, &soft)
    }, &mut store);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn focal_gamma_zero_is_half_bce(p in 0.001f64..0.999, t in any::<bool>()) {
        let l = value(|tape| {
            let x = tape.input(Array::scalar(p));
            focal_loss(tape, x, &[t], 0.5, 0.0)
        });
        let bce = if t { -p.ln() } else { -(1.0 - p).ln() };
        prop_assert!((l - 0.5 * bce).abs() < 1e-12);
    }

    #[test]
    fn one_cell_lovasz_is_target_error(k in 2usize..6, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = softmax_cols(&Array::from_fn(&[k, 1], |_| rng.random_range(-2.0..2.0)));
        let t = rng.random_range(0..k);
        let l = value(|tape| {
            let x = tape.input(p.clone());
            lovasz_softmax(tape, x, &[t])
        });
        prop_assert!((l - (1.0 - p.data()[t])).abs() < 1e-12);
    }

    #[test]
    fn losses_nonnegative(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = probs(&[3, 5], seed);
        let t: Vec<bool> = (0..15).map(|_| rng.random_bool(0.5)).collect();
        let tf: Vec<f64> = t.iter().map(|&b| b as u8 as f64).collect();
        let labels: Vec<usize> = (0..5).map(|_| rng.random_range(0..3)).collect();
        let mut tape = Tape::new();
        let x = tape.input(p.clone());
        let sm = tape.input(softmax_cols(&p));
        for l in [
            focal_loss(&mut tape, x, &t, 0.25, 2.0).unwrap(),
            dice_loss(&mut tape, x, &tf).unwrap(),
            lovasz_softmax(&mut tape, sm, &labels).unwrap(),
            cross_entropy(&mut tape, x, &labels).unwrap(),
        ] {
            prop_assert!(tape.value(l).item() >= 0.0);
        }
    }
}
