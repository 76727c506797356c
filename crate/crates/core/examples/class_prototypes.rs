//! Voxel class scores, hard masks and class-wise prototypes, then the split
//! into detection, map and occupancy groups.

use maestro::cpg::Cpg;
use maestro::numerics::{ParamStore, Tape};
use maestro::scene::{synthesize_scene, SceneConfig};

fn main() -> maestro::Result<()> {
    let cfg = SceneConfig::default();
    let (features, gt) = synthesize_scene(&cfg, 7)?;
    let tax = &cfg.taxonomy;

    let mut store = ParamStore::new();
    let cpg = Cpg::new(&mut store, tax, cfg.channels, 0)?;
    let mut tape = Tape::new();
    let fs = tape.constant(features.features);
    let out = cpg.forward(&mut tape, &store, fs, tax)?;

    println!("scores {:?}, prototypes {:?}", tape.shape(out.scores), tape.shape(out.prototypes));
    let truth: usize = gt.voxel_labels.iter().filter(|c| !c.is_free()).count();
    for m in &out.masks {
        println!("  {:<18} mask {:>5} voxels", tax.name(m.class), m.mask.count());
    }
    println!("  ({truth} non-free voxels in the ground truth; the classifier is untrained)");

    for (name, g) in [("det", &out.groups.det), ("map", &out.groups.map), ("occ", &out.groups.occ)] {
        let members: Vec<&str> = g.members.iter().map(|&c| tax.name(c)).collect();
        println!("  {name} group {:?}: {}", tape.shape(g.vectors), members.join(", "));
    }
    Ok(())
}
