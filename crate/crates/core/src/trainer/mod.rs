//! Mini-batch training with Adam, per-epoch validation and checkpoints.
//!
//! One run owns its parameters. Every random choice (batch order) comes from
//! the plan seed, and weight initialization from the model seed, so a fixed
//! plan and config reproduce each checkpoint byte when executed on one thread.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::engine::{update_running_stats, AdamConfig, AdamState, Archive, BnMode, Real, BN_MOMENTUM};
use crate::error::{Error, Result};
use crate::evalkit::{regression_metrics, TaskMetrics};
use crate::featurize::{FeaturizeOptions, MolGraph};
use crate::model::{build_instance_graphs, predict, run_batch, Execution, Model, TaskPrediction};


/// Crate version stamped into every artifact.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainPlan {
    /// Training dataset. Split chronologically unless `test` is given.
    pub train: Option<PathBuf>,
    /// Explicit test dataset.
    pub test: Option<PathBuf>,
    pub test_fraction: f64,
    /// Newest share of the training partition held out for validation.
    pub validation_fraction: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub seed: u64,
    /// Write a checkpoint every this many epochs; 0 keeps only the initial one.
    pub checkpoint_every: usize,
    pub featurize: FeaturizeOptions,
}

impl Default for TrainPlan {
    fn default() -> Self {
        TrainPlan {
            train: None,
            test: None,
            test_fraction: 0.2,
            validation_fraction: 0.1,
            epochs: 100,
            batch_size: 32,
            adam: AdamConfig { lr: 3e-3, ..AdamConfig::default() },
            seed: 0,
            checkpoint_every: 1,
            featurize: FeaturizeOptions::default(),
        }
    }
}

impl TrainPlan {
    pub fn validate(&self) -> Result<()> {
        for (name, f) in [("test_fraction", self.test_fraction), ("validation_fraction", self.validation_fraction)] {
            if !(f > 0.0 && f < 1.0) {
                return Err(Error::Config(format!("{name} {f} outside (0, 1)")));
            }
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        let a = self.adam;
        if !(a.lr > 0.0 && (0.0..1.0).contains(&a.beta1) && (0.0..1.0).contains(&a.beta2) && a.eps > 0.0) {
            return Err(Error::Config(format!("invalid Adam settings {a:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean normalized-unit loss over the epoch's supervised steps.
    pub train_loss: f64,
    pub validation: BTreeMap<String, TaskMetrics>,
    pub checkpoint: Option<String>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome<T> {
    pub model: Model<T>,
    pub adam: AdamState<T>,
    pub records: Vec<EpochRecord>,
    /// Loss of every optimizer step, in order.
    pub step_losses: Vec<f64>,
    /// Initial checkpoint, then one per cadence.
    pub checkpoints: Vec<PathBuf>,
}

pub fn checkpoint_name(epoch: usize) -> String {
    format!("epoch-{epoch:04}.ckpt")
}

/// Model archive extended with optimizer state, plan, seed and epoch.
pub fn checkpoint_archive<T: Real>(model: &Model<T>, adam: &AdamState<T>, plan: &TrainPlan, epoch: usize) -> Archive {
    let mut a = model.to_archive();
    let cfg = a.config.as_object_mut().expect("model archive config is an object");
    cfg.insert("kind".into(), json!("checkpoint"));
    cfg.insert("version".into(), json!(VERSION));
    cfg.insert("plan".into(), json!(plan));
    cfg.insert("seed".into(), json!(plan.seed));
    cfg.insert("epoch".into(), json!(epoch));
    cfg.insert("adam".into(), json!(adam.config));
    for (id, p) in model.params.entries().iter().enumerate() {
        a.push_tensor(format!("adam.m.{}", p.name), &adam.m[id]);
        a.push_tensor(format!("adam.v.{}", p.name), &adam.v[id]);
    }
    a.push_u64("adam.t", vec![adam.t]);
    a
}

/// Loads the model of a checkpoint or a bare model archive.
pub fn load_model<T: Real>(path: &Path) -> Result<Model<T>> {
    let archive = Archive::read_file(path)?;
    Model::from_archive(&archive)
}

/// Per-task metrics of inference-mode predictions over labeled molecules.
pub fn evaluate<T: Real>(model: &Model<T>, mols: &[&MolGraph], batch_size: usize) -> Result<BTreeMap<String, TaskMetrics>> {
    let preds = predict(model, mols, batch_size)?;
    let metrics = metrics_of(model.tasks(), mols, &preds);
    if metrics.is_empty() {
        return Err(Error::NoSupervision);
    }
    Ok(metrics)
}

/// Metrics for each task with at least one label; unlabeled tasks are omitted.
pub fn metrics_of(tasks: &[String], mols: &[&MolGraph], preds: &[TaskPrediction]) -> BTreeMap<String, TaskMetrics> {
    let mut out = BTreeMap::new();
    for (t, task) in tasks.iter().enumerate() {
        let (p, y): (Vec<f64>, Vec<f64>) =
            mols.iter().zip(preds).filter_map(|(m, p)| m.labels.get(task).map(|&y| (p.values[t], y))).unzip();
        if let Some(m) = regression_metrics(&p, &y) {
            out.insert(task.clone(), m);
        }
    }
    out
}

/// Trains `model` for `plan.epochs` epochs. Label scaling is fitted on
/// `train` first. With a checkpoint directory, the epoch-0 state and every
/// `checkpoint_every`-th epoch are written there.
pub fn train<T: Real>(
    plan: &TrainPlan,
    mut model: Model<T>,
    train: &[&MolGraph],
    validation: &[&MolGraph],
    checkpoint_dir: Option<&Path>,
) -> Result<TrainOutcome<T>> {
    plan.validate()?;
    if train.is_empty() {
        return Err(Error::EmptyInput("training set is empty".into()));
    }
    for task in model.tasks() {
        if !train.iter().any(|m| m.labels.contains_key(task)) {
            return Err(Error::Config(format!("task '{task}' has no labels in the training set")));
        }
    }
    model.fit_label_norm(train);
    let mut adam = AdamState::new(plan.adam, &model.params);
    let mut rng = ChaCha8Rng::seed_from_u64(plan.seed);
    let mut checkpoints = Vec::new();
    let mut save = |model: &Model<T>, adam: &AdamState<T>, epoch: usize| -> Result<Option<String>> {
        let Some(dir) = checkpoint_dir else { return Ok(None) };
        std::fs::create_dir_all(dir)?;
        let path = dir.join(checkpoint_name(epoch));
        checkpoint_archive(model, adam, plan, epoch).write_file(&path)?;
        checkpoints.push(path.clone());
        Ok(Some(path.display().to_string()))
    };
    save(&model, &adam, 0)?;

    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut records = Vec::with_capacity(plan.epochs);
    let mut step_losses = Vec::new();
    for epoch in 1..=plan.epochs {
        order.shuffle(&mut rng);
        let mut losses = Vec::new();
        for chunk in order.chunks(plan.batch_size) {
            let mols: Vec<&MolGraph> = chunk.iter().map(|&i| train[i]).collect();
            let targets = model.targets(&mols);
            let batch = match build_instance_graphs(&model, &mols, BnMode::Train, Some(&targets)) {
                Err(Error::NoSupervision) => continue,
                other => other?,
            };
            let step = step_losses.len();
            let run = run_batch(&model, batch, Execution::Batched, true)?;
            let loss = run.loss.unwrap_or(f64::NAN);
            let Some(grads) = run.grads.filter(|_| !run.non_finite && loss.is_finite()) else {
                return Err(Error::Divergence { step });
            };
            update_running_stats(&mut model.params, &run.bn_stats, BN_MOMENTUM);
            adam.step(&mut model.params, &grads);
            step_losses.push(loss);
            losses.push(loss);
        }
        let train_loss = if losses.is_empty() { 0.0 } else { losses.iter().sum::<f64>() / losses.len() as f64 };
        let validation = if validation.is_empty() {
            BTreeMap::new()
        } else {
            let preds = predict(&model, validation, plan.batch_size)?;
            metrics_of(model.tasks(), validation, &preds)
        };
        let due = plan.checkpoint_every > 0 && epoch % plan.checkpoint_every == 0;
        let checkpoint = if due { save(&model, &adam, epoch)? } else { None };
        log::info!("epoch {epoch} loss {train_loss:.5}");
        records.push(EpochRecord { epoch, train_loss, validation, checkpoint });
    }
    Ok(TrainOutcome { model, adam, records, step_losses, checkpoints })
}

/// Splits a chronologically ordered training partition into (fit, validation)
/// with the newest `fraction` as validation.
pub fn validation_split<'a>(train: &[&'a MolGraph], fraction: f64) -> (Vec<&'a MolGraph>, Vec<&'a MolGraph>) {
    let n_val = crate::molio::tail_count(train.len(), fraction).min(train.len().saturating_sub(1));
    let cut = train.len() - n_val;
    (train[..cut].to_vec(), train[cut..].to_vec())
}

/// Writes records as JSON Lines.
pub fn write_records<W: std::io::Write>(records: &[EpochRecord], mut out: W) -> Result<()> {
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        writeln!(out)?;
    }
    Ok(())
}
