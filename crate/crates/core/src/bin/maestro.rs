use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use maestro::gradsuite;
use maestro::harness::{
    self, cached_runner, compare, evaluate, load_results, write_report, CompareSpec, Matrix, RunOptions, Sample,
    Trainer, TrainConfig, SCHEMA_VERSION,
};
use maestro::metrics::MetricsReport;
use maestro::numerics::GradCheckConfig;
use maestro::scene::{synthesize_scene, SceneConfig, SceneDump};
use maestro::{Error, Result};

#[derive(Parser)]
#[command(name = "maestro", version, about = "Multi-task voxel perception on synthetic scenes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write seeded scene dumps as JSON.
    Synth {
        /// Training config whose scene_config is used (defaults otherwise).
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 4)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Include the shared feature grid in each dump.
        #[arg(long)]
        features: bool,
        #[arg(long, default_value = "scenes")]
        out: PathBuf,
    },
    /// Train one config and evaluate it on its validation split.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Print the effective config (defaults filled in) and exit.
        #[arg(long)]
        print_config: bool,
        #[arg(long, default_value = "run")]
        out: PathBuf,
        /// Continue from a checkpoint written by an earlier run of this config.
        #[arg(long)]
        resume: Option<PathBuf>,
        #[arg(long)]
        quiet: bool,
    },
    /// Metrics of a checkpoint on the validation split or on scene dumps.
    Eval {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Directory of dumps written with `synth --features`.
        #[arg(long)]
        scenes: Option<PathBuf>,
    },
    /// Run an ablation matrix and write one aligned CSV.
    Compare {
        /// Compare spec (base config, matrix, seeds).
        #[arg(long, conflicts_with_all = ["base", "matrix", "seeds"])]
        spec: Option<PathBuf>,
        #[arg(long)]
        base: Option<PathBuf>,
        /// main, tsfg, spa, headline or all.
        #[arg(long, default_value = "all")]
        matrix: String,
        #[arg(long, value_delimiter = ',', default_value = "0")]
        seeds: Vec<u64>,
        #[arg(long, default_value = "compare")]
        out: PathBuf,
        /// List the configurations without training.
        #[arg(long)]
        dry_run: bool,
        #[arg(long)]
        quiet: bool,
    },
    /// Finite-difference check of every differentiable operation and loss.
    Gradcheck {
        #[arg(long, default_value_t = 100)]
        trials: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Only cases whose name contains this string.
        #[arg(long)]
        filter: Option<String>,
    },
    /// Summaries and loss-curve data from finished runs.
    Report {
        /// Directory searched recursively for result.json files.
        #[arg(long)]
        runs: PathBuf,
        #[arg(long, default_value = "report")]
        out: PathBuf,
    },
}

fn read_config(path: Option<&PathBuf>) -> Result<TrainConfig> {
    match path {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?;
            TrainConfig::from_json(&text)
        }
        None => Ok(TrainConfig::default()),
    }
}

fn synth(config: Option<&PathBuf>, count: usize, seed: u64, features: bool, out: &PathBuf) -> Result<()> {
    let sc: SceneConfig = read_config(config)?.scene_config;
    fs::create_dir_all(out)?;
    let tax = &sc.taxonomy;
    let map_names: Vec<String> = tax.map_classes.iter().map(|m| m.name.clone()).collect();
    for i in 0..count {
        let s = seed + i as u64;
        let (f, gt) = synthesize_scene(&sc, s)?;
        let dump = SceneDump::new(&gt, &tax.names, &map_names, features.then_some(&f));
        let path = out.join(format!("scene_{s:06}.json"));
        dump.save(&path)?;
        println!("{}", path.display());
    }
    Ok(())
}

fn train(cfg: TrainConfig, out: PathBuf, resume: Option<PathBuf>, quiet: bool) -> Result<()> {
    let r = harness::run_experiment(
        &cfg,
        &RunOptions {
            out_dir: Some(out.clone()),
            resume,
            verbose: !quiet,
        },
    )?;
    println!("{}", MetricsReport::CSV_HEADER);
    println!("{}", r.metrics.csv_row());
    eprintln!(
        "loss {:.4} -> {:.4}, results in {}",
        r.initial_loss.total,
        r.final_loss.total,
        out.display()
    );
    Ok(())
}

fn eval(config: &PathBuf, checkpoint: &Path, scenes: Option<&PathBuf>) -> Result<()> {
    let cfg = read_config(Some(config))?;
    let trainer = Trainer::load_checkpoint(&cfg, checkpoint)?;
    let samples = match scenes {
        None => (0..cfg.val_scenes)
            .map(|i| Sample::synthesize(&cfg.scene_config, cfg.val_seed(i)))
            .collect::<Result<Vec<_>>>()?,
        Some(dir) => {
            let mut paths: Vec<PathBuf> = fs::read_dir(dir)?
                .map(|e| e.map(|e| e.path()))
                .collect::<std::io::Result<_>>()?;
            paths.retain(|p| p.extension().is_some_and(|x| x == "json"));
            paths.sort();
            paths
                .iter()
                .map(|p| {
                    let d = SceneDump::load(p)?;
                    let gt = d.ground_truth()?;
                    let f = d.shared_features()?.ok_or_else(|| {
                        Error::Config(format!("{} has no features (write it with synth --features)", p.display()))
                    })?;
                    Ok(Sample::new(f, &gt))
                })
                .collect::<Result<Vec<_>>>()?
        }
    };
    let report = evaluate(&trainer.model, &samples)?;
    println!("{}", MetricsReport::CSV_HEADER);
    println!("{}", report.csv_row());
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn run_compare(
    spec: Option<&PathBuf>,
    base: Option<&PathBuf>,
    matrix: &str,
    seeds: Vec<u64>,
    out: &Path,
    dry_run: bool,
    quiet: bool,
) -> Result<()> {
    let spec = match spec {
        Some(p) => CompareSpec::from_json(&fs::read_to_string(p).map_err(|e| Error::Config(e.to_string()))?)?,
        None => CompareSpec {
            schema_version: SCHEMA_VERSION,
            base: read_config(base)?,
            matrix: matrix.parse::<Matrix>()?,
            seeds,
        },
    };
    let configs = spec.configs();
    harness::check_comparable(&configs)?;
    if dry_run {
        for c in &configs {
            println!("{}\t{}\tseed {}\t{}", c.table, c.label, c.config.seed, &c.config.fingerprint()[..16]);
        }
        return Ok(());
    }
    let runs = out.join("runs");
    let table = compare(&configs, cached_runner(&runs, !quiet))?;
    let csv = table.to_csv();
    fs::write(out.join("comparison.csv"), &csv)?;
    fs::write(out.join("comparison.json"), serde_json::to_string_pretty(&table)?)?;
    print!("{csv}");
    Ok(())
}

fn gradcheck(trials: usize, seed: u64, filter: Option<&str>) -> Result<bool> {
    let report = gradsuite::run_suite(trials, seed, GradCheckConfig::default(), filter)?;
    for c in &report.cases {
        println!(
            "{:<24} {:>4} trials {:>3} failed {:>3} redrawn  worst rel {:.2e} abs {:.2e}  {:.2}s",
            c.name, c.trials, c.failures, c.redraws, c.worst_rel, c.worst_abs, c.seconds
        );
    }
    let failed = report.cases.iter().filter(|c| !c.pass()).count();
    println!("{} cases, {failed} failed, {:.1}s", report.cases.len(), report.seconds);
    Ok(report.pass())
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Synth {
            config,
            count,
            seed,
            features,
            out,
        } => synth(config.as_ref(), count, seed, features, &out)?,
        Command::Train {
            config,
            print_config,
            out,
            resume,
            quiet,
        } => {
            let cfg = read_config(config.as_ref())?;
            if print_config {
                println!("{}", cfg.to_json());
            } else {
                train(cfg, out, resume, quiet)?;
            }
        }
        Command::Eval {
            config,
            checkpoint,
            scenes,
        } => eval(&config, &checkpoint, scenes.as_ref())?,
        Command::Compare {
            spec,
            base,
            matrix,
            seeds,
            out,
            dry_run,
            quiet,
        } => run_compare(spec.as_ref(), base.as_ref(), &matrix, seeds, &out, dry_run, quiet)?,
        Command::Gradcheck { trials, seed, filter } => {
            if !gradcheck(trials, seed, filter.as_deref())? {
                return Ok(ExitCode::FAILURE);
            }
        }
        Command::Report { runs, out } => {
            let results = load_results(&runs)?;
            write_report(&results, &out)?;
            print!("{}", harness::summary_text(&results));
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
