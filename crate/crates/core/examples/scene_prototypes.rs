//! From decoded boxes and thresholded map masks to scene prototypes that
//! seed the occupancy decoder.

use maestro::numerics::{Array, Tape};
use maestro::scene::{synthesize_scene, SceneConfig};
use maestro::spa::{aggregate, detection_prototypes, map_prototypes, CorrespondenceTable, DecodedBox, Source};

fn main() -> maestro::Result<()> {
    let cfg = SceneConfig::default();
    let (features, gt) = synthesize_scene(&cfg, 5)?;
    let tax = &cfg.taxonomy;
    let g = gt.geometry;
    let c = cfg.channels;

    // BEV features: the shared grid averaged over height
    let f = &features.features;
    let bev = Array::from_fn(&[c, g.x, g.y], |i| {
        (0..g.z).map(|l| f.data()[i * g.z + l]).sum::<f64>() / g.z as f64
    });
    // ground truth stands in for the heads' predictions here
    let boxes: Vec<DecodedBox> = gt.bev_boxes().into_iter().map(|bev| DecodedBox { bev, score: 1.0 }).collect();
    let probs = Array::from_fn(&[tax.n_map(), g.x, g.y], |i| {
        if gt.map_masks[i / g.bev_cells()].bits()[i % g.bev_cells()] { 0.9 } else { 0.1 }
    });

    let mut tape = Tape::new();
    let x = tape.constant(bev);
    let p_det = detection_prototypes(&mut tape, x, &g, tax, &boxes, 3)?;
    let p_map = map_prototypes(&mut tape, x, &g, &probs, 0.5)?;
    let occ = tape.constant(Array::zeros(&[tax.k(), c]));

    let table = CorrespondenceTable::from_taxonomy(tax);
    for (member, contributors) in table.members.iter().zip(&table.contributors) {
        let names: Vec<String> = contributors
            .iter()
            .map(|k| match k.source {
                Source::Det => format!("det:{}", tax.name(tax.foreground[k.index])),
                Source::Map => format!("map:{}", tax.map_classes[k.index].name),
            })
            .collect();
        println!("  {:<18} <- {}", tax.name(*member), names.join(" "));
    }

    for (label, t) in [
        ("all sources", table.clone()),
        ("without map", table.without(Source::Map)),
        ("without map and det", table.without(Source::Map).without(Source::Det)),
    ] {
        let scene = aggregate(&mut tape, occ, p_det, p_map, &t)?;
        let v = tape.value(scene);
        let nonzero = (0..tax.k()).filter(|&r| v.row(r).iter().any(|&x| x != 0.0)).count();
        println!("{label}: {nonzero}/{} scene prototypes carry scene evidence", tax.k());
    }
    Ok(())
}
