use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::LossBreakdown;
use crate::metrics::{default_thresholds, DetectionScene, Evaluator, MetricsReport};
use crate::numerics::checkpoint::{read_container, write_container, Container};
use crate::numerics::{derive_seed, Tape};

use super::config::TrainConfig;
use super::model::{Model, Sample};
use super::optim::AdamW;

/// Scenes used to measure the loss before and after training.
pub const PROBE_SCENES: usize = 16;

/// Seeded train and validation scenes of a config.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub train: Vec<Sample>,
    pub val: Vec<Sample>,
}

impl Dataset {
    pub fn generate(cfg: &TrainConfig) -> Result<Self> {
        let sc = &cfg.scene_config;
        let train = (0..cfg.train_scenes)
            .map(|i| Sample::synthesize(sc, cfg.train_seed(i)))
            .collect::<Result<_>>()?;
        let val = (0..cfg.val_scenes)
            .map(|i| Sample::synthesize(sc, cfg.val_seed(i)))
            .collect::<Result<_>>()?;
        Ok(Self { train, val })
    }

    pub fn probe(&self) -> &[Sample] {
        &self.train[..self.train.len().min(PROBE_SCENES)]
    }
}

/// One optimizer step on a batch: mean loss over the batch, backward,
/// gradient-norm guard, AdamW update. Returns the pre-update losses.
pub fn train_step(model: &mut Model, batch: &[&Sample], opt: &mut AdamW, cfg: &TrainConfig) -> Result<LossBreakdown> {
    if batch.is_empty() {
        return Err(Error::contract("train_step needs a nonempty batch"));
    }
    model.store.zero_grad();
    let w = 1.0 / batch.len() as f64;
    let mut mean = LossBreakdown::default();
    for sample in batch {
        let mut tape = Tape::new();
        let fwd = model.forward(&mut tape, &sample.features)?;
        let (total, parts) = model.losses(&mut tape, &fwd, sample, &cfg.loss_clamps)?;
        let scaled = tape.scale(total, w)?;
        tape.backward_scalar(scaled, &mut model.store)?;
        mean.accumulate(&parts, w);
    }
    let norm = model.store.grad_norm();
    if !norm.is_finite() || norm > cfg.loss_clamps.max_grad_norm {
        return Err(Error::Numerical {
            component: "gradient".into(),
            detail: format!("norm {norm:e} exceeds {:e}", cfg.loss_clamps.max_grad_norm),
        });
    }
    opt.update(&mut model.store)?;
    Ok(mean)
}

/// Mean loss breakdown over `samples` at the current parameters.
pub fn mean_loss(model: &Model, samples: &[Sample], cfg: &TrainConfig) -> Result<LossBreakdown> {
    let mut mean = LossBreakdown::default();
    let w = 1.0 / samples.len().max(1) as f64;
    for s in samples {
        mean.accumulate(&model.evaluate_loss(s, &cfg.loss_clamps)?, w);
    }
    Ok(mean)
}

/// Metrics of `model` over `samples`.
pub fn evaluate(model: &Model, samples: &[Sample]) -> Result<MetricsReport> {
    let mut ev = Evaluator::new(
        &model.taxonomy,
        model.map_threshold,
        default_thresholds(model.geometry.cell_size),
    );
    for s in samples {
        let p = model.predict(&s.features)?;
        ev.add_scene(
            &p.map_probabilities,
            &s.map_masks,
            &p.occ_logits,
            &s.labels,
            DetectionScene {
                predictions: p.boxes,
                ground_truth: s.boxes.clone(),
            },
        )?;
    }
    Ok(ev.report())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    /// Mean training loss over the epoch's steps.
    pub loss: LossBreakdown,
}

/// Model, optimizer and position in the schedule.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub cfg: TrainConfig,
    pub model: Model,
    pub opt: AdamW,
    pub step: usize,
    pub epochs: Vec<EpochLog>,
    /// Running mean of the unfinished epoch.
    pub partial: LossBreakdown,
}

#[derive(Serialize, Deserialize)]
struct CheckpointMeta {
    fingerprint: String,
    step: usize,
    adam_step: u64,
    epochs: Vec<EpochLog>,
    partial: LossBreakdown,
}

impl Trainer {
    pub fn new(cfg: &TrainConfig) -> Result<Self> {
        let model = Model::new(cfg)?;
        let opt = AdamW::new(&model.store, cfg.learning_rate, cfg.weight_decay);
        Ok(Self {
            cfg: cfg.clone(),
            model,
            opt,
            step: 0,
            epochs: Vec::new(),
            partial: LossBreakdown::default(),
        })
    }

    pub fn total_steps(&self) -> usize {
        self.cfg.epochs * self.cfg.steps_per_epoch()
    }

    pub fn finished(&self) -> bool {
        self.step >= self.total_steps()
    }

    /// Scene order of an epoch, a pure function of `(seed, epoch)`.
    pub fn epoch_order(&self, epoch: usize) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.cfg.train_scenes).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.cfg.seed, &format!("epoch/{epoch}")));
        order.shuffle(&mut rng);
        order
    }

    /// Runs the next scheduled step.
    pub fn step_once(&mut self, train: &[Sample]) -> Result<LossBreakdown> {
        if train.len() != self.cfg.train_scenes {
            return Err(Error::contract(format!(
                "trainer expects {} scenes, got {}",
                self.cfg.train_scenes,
                train.len()
            )));
        }
        let spe = self.cfg.steps_per_epoch();
        let (epoch, b) = (self.step / spe, self.step % spe);
        let order = self.epoch_order(epoch);
        let bs = self.cfg.batch_size;
        let idx = &order[b * bs..((b + 1) * bs).min(order.len())];
        let batch: Vec<&Sample> = idx.iter().map(|&i| &train[i]).collect();
        let loss = train_step(&mut self.model, &batch, &mut self.opt, &self.cfg)?;
        self.partial.accumulate(&loss, batch.len() as f64 / self.cfg.train_scenes as f64);
        self.step += 1;
        if self.step.is_multiple_of(spe) {
            self.epochs.push(EpochLog {
                epoch,
                loss: self.partial,
            });
            self.partial = LossBreakdown::default();
        }
        Ok(loss)
    }

    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        let meta = CheckpointMeta {
            fingerprint: self.cfg.fingerprint(),
            step: self.step,
            adam_step: self.opt.step,
            epochs: self.epochs.clone(),
            partial: self.partial,
        };
        let mut entries = Vec::with_capacity(3 * self.model.store.len());
        for (_, p) in self.model.store.iter() {
            entries.push((p.name.clone(), p.value.clone()));
        }
        for (tag, moments) in [("m", &self.opt.m), ("v", &self.opt.v)] {
            for ((_, p), a) in self.model.store.iter().zip(moments) {
                entries.push((format!("adam/{tag}/{}", p.name), a.clone()));
            }
        }
        let c = Container {
            meta: serde_json::to_string(&meta)?,
            entries,
        };
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir)?;
        }
        let mut buf = Vec::new();
        write_container(&mut buf, &c)?;
        fs::write(path, buf)?;
        Ok(())
    }

    /// Restores a checkpoint written for the same config. Any parameter
    /// missing, extra or differently shaped is refused.
    pub fn load_checkpoint(cfg: &TrainConfig, path: &Path) -> Result<Self> {
        let c = read_container(fs::File::open(path)?)?;
        let meta: CheckpointMeta =
            serde_json::from_str(&c.meta).map_err(|e| Error::Checkpoint(format!("bad metadata: {e}")))?;
        if meta.fingerprint != cfg.fingerprint() {
            return Err(Error::Checkpoint(format!(
                "checkpoint was written for config {} but this config is {}",
                meta.fingerprint,
                cfg.fingerprint()
            )));
        }
        let mut t = Self::new(cfg)?;
        let n = t.model.store.len();
        if c.entries.len() != 3 * n {
            return Err(Error::Checkpoint(format!(
                "checkpoint holds {} arrays, model needs {}",
                c.entries.len(),
                3 * n
            )));
        }
        let fetch = |name: &str, shape: &[usize]| -> Result<crate::numerics::Array> {
            let a = c
                .get(name)
                .ok_or_else(|| Error::Checkpoint(format!("missing array `{name}`")))?;
            if a.shape() != shape {
                return Err(Error::Checkpoint(format!(
                    "`{name}` has shape {:?}, model expects {shape:?}",
                    a.shape()
                )));
            }
            Ok(a.clone())
        };
        let ids: Vec<_> = t.model.store.ids().collect();
        for (k, id) in ids.into_iter().enumerate() {
            let (name, shape) = {
                let p = t.model.store.get(id);
                (p.name.clone(), p.value.shape().to_vec())
            };
            *t.model.store.value_mut(id) = fetch(&name, &shape)?;
            t.opt.m[k] = fetch(&format!("adam/m/{name}"), &shape)?;
            t.opt.v[k] = fetch(&format!("adam/v/{name}"), &shape)?;
        }
        t.opt.step = meta.adam_step;
        t.step = meta.step;
        t.epochs = meta.epochs;
        t.partial = meta.partial;
        Ok(t)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentResult {
    pub fingerprint: String,
    pub label: String,
    pub seed: u64,
    pub config: TrainConfig,
    /// Mean loss over the probe scenes before any update.
    pub initial_loss: LossBreakdown,
    /// Mean loss over the same scenes after the last epoch.
    pub final_loss: LossBreakdown,
    pub trajectory: Vec<EpochLog>,
    pub metrics: MetricsReport,
    pub seconds: f64,
}

#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    /// Directory for the config copy, log, checkpoint, metrics CSV and result.
    pub out_dir: Option<PathBuf>,
    /// Continue from this checkpoint instead of a fresh model.
    pub resume: Option<PathBuf>,
    /// Progress lines on stderr.
    pub verbose: bool,
}

/// Trains on the seeded train split and evaluates on the validation split.
pub fn run_experiment(cfg: &TrainConfig, opts: &RunOptions) -> Result<ExperimentResult> {
    cfg.validate()?;
    let start = Instant::now();
    let data = Dataset::generate(cfg)?;
    run_on(cfg, &data, opts, start)
}

/// As [`run_experiment`] on already generated scenes.
pub fn run_on(cfg: &TrainConfig, data: &Dataset, opts: &RunOptions, start: Instant) -> Result<ExperimentResult> {
    let mut trainer = match &opts.resume {
        Some(p) => Trainer::load_checkpoint(cfg, p)?,
        None => Trainer::new(cfg)?,
    };
    let initial_loss = {
        let fresh = Model::new(cfg)?;
        mean_loss(&fresh, data.probe(), cfg)?
    };
    let mut log = match &opts.out_dir {
        Some(dir) => {
            fs::create_dir_all(dir)?;
            fs::write(dir.join("config.json"), cfg.to_json())?;
            let f = fs::OpenOptions::new()
                .create(true)
                .append(opts.resume.is_some())
                .write(true)
                .truncate(opts.resume.is_none())
                .open(dir.join("log.jsonl"))?;
            Some(f)
        }
        None => None,
    };
    let label = cfg.toggles.label();
    while !trainer.finished() {
        let epochs_before = trainer.epochs.len();
        trainer.step_once(&data.train)?;
        if trainer.epochs.len() > epochs_before {
            let e = trainer.epochs.last().expect("epoch just closed");
            if let Some(f) = log.as_mut() {
                writeln!(f, "{}", serde_json::to_string(e)?)?;
            }
            if let Some(dir) = &opts.out_dir {
                trainer.save_checkpoint(&dir.join("checkpoint.bin"))?;
            }
            if opts.verbose {
                eprintln!(
                    "[{label} seed {}] epoch {}/{} loss {:.4} ({:.0}s)",
                    cfg.seed,
                    e.epoch + 1,
                    cfg.epochs,
                    e.loss.total,
                    start.elapsed().as_secs_f64()
                );
            }
        }
    }
    let final_loss = mean_loss(&trainer.model, data.probe(), cfg)?;
    let metrics = evaluate(&trainer.model, &data.val)?;
    let result = ExperimentResult {
        fingerprint: cfg.fingerprint(),
        label,
        seed: cfg.seed,
        config: cfg.clone(),
        initial_loss,
        final_loss,
        trajectory: trainer.epochs.clone(),
        metrics,
        seconds: start.elapsed().as_secs_f64(),
    };
    if let Some(dir) = &opts.out_dir {
        trainer.save_checkpoint(&dir.join("checkpoint.bin"))?;
        fs::write(
            dir.join("metrics.csv"),
            format!("{}\n{}\n", MetricsReport::CSV_HEADER, result.metrics.csv_row()),
        )?;
        fs::write(dir.join("result.json"), serde_json::to_string_pretty(&result)?)?;
    }
    Ok(result)
}
