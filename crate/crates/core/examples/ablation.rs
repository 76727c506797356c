//! Every row of the ablation matrix on a tiny config, written as one aligned CSV.

use maestro::harness::{compare, run_experiment, CompareSpec, Matrix, RunOptions, TrainConfig, SCHEMA_VERSION};

fn main() -> maestro::Result<()> {
    let spec = CompareSpec {
        schema_version: SCHEMA_VERSION,
        base: TrainConfig {
            epochs: 1,
            ..TrainConfig::smoke()
        },
        matrix: Matrix::All,
        seeds: vec![0],
    };
    let configs = spec.configs();
    println!("{} runs", configs.len());
    let table = compare(&configs, |c| {
        eprintln!("  {} / {}", c.table, c.label);
        run_experiment(&c.config, &RunOptions::default())
    })?;
    print!("{}", table.to_csv());
    Ok(())
}
