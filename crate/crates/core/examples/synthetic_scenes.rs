//! Generate a seeded scene, look at what it contains and write it to disk.

use maestro::scene::{derive_roi_mask, synthesize_scene, SceneConfig, SceneDump, Task};

fn main() -> maestro::Result<()> {
    let cfg = SceneConfig::default();
    let (features, gt) = synthesize_scene(&cfg, 42)?;
    let tax = &cfg.taxonomy;
    let g = gt.geometry;
    println!("grid {}x{}x{} at {} m, features {:?}", g.x, g.y, g.z, g.cell_size, features.features.shape());

    let mut counts = vec![0usize; tax.k() + 1];
    for c in &gt.voxel_labels {
        counts[tax.occ_channel(*c)] += 1;
    }
    for (c, n) in tax.occ_order().iter().zip(&counts) {
        println!("  {:<18} {n:>5} voxels", tax.name(*c));
    }
    for b in gt.bev_boxes() {
        println!(
            "  box {:<10} at ({:.1}, {:.1}) size {:.1}x{:.1} yaw {:+.2}",
            tax.name(b.class),
            b.center[0],
            b.center[1],
            b.size[0],
            b.size[1],
            b.yaw
        );
    }
    for t in Task::ALL {
        println!("  {} suppression RoI covers {} cells", t.as_str(), derive_roi_mask(&gt, t).mask.count());
    }

    let map_names: Vec<String> = tax.map_classes.iter().map(|m| m.name.clone()).collect();
    let path = std::env::temp_dir().join("maestro_scene_42.json");
    SceneDump::new(&gt, &tax.names, &map_names, None).save(&path)?;
    let back = SceneDump::load(&path)?.ground_truth()?;
    assert_eq!(back.voxel_labels, gt.voxel_labels);
    println!("wrote {}", path.display());
    Ok(())
}
