//! Train a small config, interrupt it, resume from the checkpoint and check
//! the result matches an uninterrupted run bit for bit.

use maestro::harness::{evaluate, Dataset, TrainConfig, Trainer};

fn main() -> maestro::Result<()> {
    let cfg = TrainConfig {
        epochs: 4,
        ..TrainConfig::smoke()
    };
    let data = Dataset::generate(&cfg)?;

    let mut straight = Trainer::new(&cfg)?;
    while !straight.finished() {
        let l = straight.step_once(&data.train)?;
        println!("step {:>2} loss {:.4}", straight.step, l.total);
    }

    let path = std::env::temp_dir().join("maestro_example_checkpoint.bin");
    let mut first = Trainer::new(&cfg)?;
    for _ in 0..5 {
        first.step_once(&data.train)?;
    }
    first.save_checkpoint(&path)?;
    let mut resumed = Trainer::load_checkpoint(&cfg, &path)?;
    while !resumed.finished() {
        resumed.step_once(&data.train)?;
    }

    let same = straight
        .model
        .store
        .iter()
        .zip(resumed.model.store.iter())
        .all(|((_, a), (_, b))| a.value == b.value);
    println!("resumed run identical: {same}");
    let m = evaluate(&resumed.model, &data.val)?;
    println!("validation: map mIoU {:?} occ mIoU {:?} det mAP {:?}", m.map_miou, m.occ_miou, m.det_map);
    Ok(())
}
