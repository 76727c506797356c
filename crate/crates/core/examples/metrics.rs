//! Score hand-made predictions: map IoU, occupancy IoU and detection AP.

use maestro::metrics::{default_thresholds, DetectionScene, Evaluator};
use maestro::numerics::Array;
use maestro::scene::{synthesize_scene, SceneConfig};
use maestro::spa::DecodedBox;

fn main() -> maestro::Result<()> {
    let cfg = SceneConfig::default();
    let tax = &cfg.taxonomy;
    let mut ev = Evaluator::new(tax, 0.5, default_thresholds(cfg.geometry.cell_size));

    for seed in 0..4 {
        let (_, gt) = synthesize_scene(&cfg, seed)?;
        let g = gt.geometry;
        // map: the truth, with the first column of cells missed
        let probs = Array::from_fn(&[tax.n_map(), g.x, g.y], |i| {
            let cell = i % g.bev_cells();
            let hit = gt.map_masks[i / g.bev_cells()].bits()[cell] && cell >= g.y;
            if hit { 0.8 } else { 0.2 }
        });
        // occupancy: logits peaked at the true class
        let v = g.voxels();
        let logits = Array::from_fn(&[tax.k() + 1, g.x, g.y, g.z], |i| {
            let (ch, cell) = (i / v, i % v);
            if tax.occ_channel(gt.voxel_labels[cell]) == ch { 2.0 } else { 0.0 }
        });
        // detection: every box found but shifted by one cell, plus a false alarm
        let mut preds: Vec<DecodedBox> = gt
            .bev_boxes()
            .into_iter()
            .map(|mut b| {
                b.center[0] += g.cell_size;
                DecodedBox { bev: b, score: 0.9 }
            })
            .collect();
        if let Some(first) = preds.first().copied() {
            let mut fa = first;
            fa.bev.center = [1.0, 1.0];
            fa.score = 0.95;
            preds.push(fa);
        }
        ev.add_scene(
            &probs,
            &gt.map_masks,
            &logits,
            &gt.voxel_labels,
            DetectionScene {
                predictions: preds,
                ground_truth: gt.bev_boxes(),
            },
        )?;
    }
    let r = ev.report();
    println!("map mIoU {:?}\nocc mIoU {:?}\ndet mAP  {:?}", r.map_miou, r.occ_miou, r.det_map);
    for s in &r.det_ap {
        println!("  AP {:<10} {:?}", s.class, s.value);
    }
    Ok(())
}
