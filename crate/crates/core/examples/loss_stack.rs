//! Every loss term of the full model on one scene, then a few hundred steps
//! on that scene alone to watch each term fall.

use maestro::harness::{AdamW, Model, Sample, TrainConfig};
use maestro::losses::LossBreakdown;
use maestro::numerics::Tape;

fn show(step: usize, l: &LossBreakdown) {
    println!(
        "{step:>4}  cpg {:.4}  sup {:.4}  det {:.4}  map {:.4}  occ {:.4}  total {:.4}",
        l.l_cpg, l.l_sup, l.l_det, l.l_map, l.l_occ, l.total
    );
}

fn main() -> maestro::Result<()> {
    let cfg = TrainConfig {
        learning_rate: 3e-3,
        ..TrainConfig::smoke()
    };
    let sample = Sample::synthesize(&cfg.scene_config, 9)?;
    let mut model = Model::new(&cfg)?;
    let mut opt = AdamW::new(&model.store, cfg.learning_rate, cfg.weight_decay);
    println!("{} parameters", model.store.num_scalars());

    for step in 0..=150 {
        model.store.zero_grad();
        let mut tape = Tape::new();
        let fwd = model.forward(&mut tape, &sample.features)?;
        let (total, parts) = model.losses(&mut tape, &fwd, &sample, &cfg.loss_clamps)?;
        if step % 30 == 0 {
            show(step, &parts);
        }
        tape.backward_scalar(total, &mut model.store)?;
        opt.update(&mut model.store)?;
    }
    Ok(())
}
