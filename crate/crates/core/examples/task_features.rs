//! One task branch on the detection BEV features: prototype-wise features,
//! channel rescaling, fusion and suppression, each part switchable.

use maestro::cpg::Cpg;
use maestro::numerics::{ParamStore, Tape};
use maestro::scene::{synthesize_scene, SceneConfig, Task};
use maestro::tsfg::{Transform, TsfgBranch, TsfgParts};

fn main() -> maestro::Result<()> {
    let cfg = SceneConfig::default();
    let (features, _) = synthesize_scene(&cfg, 3)?;
    let tax = &cfg.taxonomy;
    let c = cfg.channels;

    for parts in [
        TsfgParts::ALL,
        TsfgParts {
            suppression: false,
            ..TsfgParts::ALL
        },
        TsfgParts {
            prototype_wise: false,
            prototype_aware: false,
            suppression: true,
        },
    ] {
        let mut store = ParamStore::new();
        let cpg = Cpg::new(&mut store, tax, c, 0)?;
        let transform = Transform::new(&mut store, Task::Det, c, cfg.geometry.z, 0)?;
        let branch = TsfgBranch::new(&mut store, Task::Det, parts, c, tax.n_fg(), 0)?;

        let mut tape = Tape::new();
        let fs = tape.constant(features.features.clone());
        let groups = cpg.forward(&mut tape, &store, fs, tax)?.groups;
        let bev = transform.forward(&mut tape, &store, fs)?;
        let out = branch.forward(&mut tape, &store, bev, Some(groups.det.vectors))?;

        let energy = |v| tape.value(v).data().iter().map(|x: &f64| x * x).sum::<f64>().sqrt();
        println!("{parts:?}");
        println!("  transformed {:?} |F| {:.3}", tape.shape(bev), energy(bev));
        if let Some(w) = out.wise {
            println!("  prototype-wise {:?}", tape.shape(w));
        }
        if let Some(g) = out.gamma {
            let v = tape.value(g).data();
            let (lo, hi) = v.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &x| (a.min(x), b.max(x)));
            println!("  channel scales in [{lo:.3}, {hi:.3}]");
        }
        if let Some(s) = out.scores {
            let v = tape.value(s).data();
            let mean = v.iter().sum::<f64>() / v.len() as f64;
            println!("  suppression scores mean {mean:.3}");
        }
        println!("  task-specific |F| {:.3}", energy(out.task_specific));
    }
    Ok(())
}
