//! End-to-end runs: configuration sections, dataset loading, chronological
//! splits, training, prediction files, evaluation reports and fine-tuning.
//!
//! Every artifact written here starts with a header carrying the crate
//! version, the resolved configuration and the seed.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::batcher::{compile_batch, render_plan};
use crate::config::{apply_overrides, from_value, merge};
use crate::engine::{BnMode, Real};
use crate::error::{Error, Result};
use crate::evalkit::{fingerprint, similarity_report, SimilarityReport, TaskMetrics, DEFAULT_RADIUS, DEFAULT_WIDTH};
use crate::featurize::{featurize_all, read_cache_file, FeaturizeOptions, MolGraph, CACHE_MAGIC};
use crate::finetune::{
    default_candidate_configs, select_models, train_finetune, CandidatePool, EnsembleConfig, EnsembleModel,
    FinetuneOutcome, DEFAULT_TOP_K,
};
use crate::model::{build_instance_graphs, predict, Model, ModelConfig, TaskPrediction};
use crate::molio::{chronological_order, read_dataset_file, tail_count, MoleculeRecord};
use crate::synth::SynthConfig;
use crate::trainer::{evaluate, train, validation_split, write_records, EpochRecord, TrainOutcome, TrainPlan, VERSION};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub radius: usize,
    pub width: usize,
    /// Similarity bin edges, strictly increasing.
    pub edges: Vec<f64>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig { radius: DEFAULT_RADIUS, width: DEFAULT_WIDTH, edges: vec![0.0, 0.2, 0.4, 0.6, 0.8, 1.0] }
    }
}

/// The configuration file schema: one section per stage.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub model: ModelConfig,
    pub train: TrainPlan,
    pub ensemble: EnsembleConfig,
    /// Members kept by fine-tuning selection; 0 means the default of 5.
    pub select: usize,
    pub eval: EvalConfig,
    pub synth: SynthConfig,
}

impl ExperimentConfig {
    /// Resolves a config file value, `key=value` overrides and an optional
    /// seed, which replaces every section's seed.
    pub fn resolve(file: Option<Value>, overrides: &[String], seed: Option<u64>) -> Result<Self> {
        // start from the full defaults so a partial nested section keeps its siblings
        let mut root = ExperimentConfig::default().to_value();
        if let Some(file) = file {
            merge(&mut root, file);
        }
        apply_overrides(&mut root, overrides)?;
        let mut cfg: ExperimentConfig = from_value(root)?;
        if let Some(s) = seed {
            cfg.model.seed = s;
            cfg.train.seed = s;
            cfg.ensemble.seed = s;
            cfg.synth.seed = s;
        }
        Ok(cfg)
    }

    pub fn seed(&self) -> u64 {
        self.train.seed
    }

    pub fn select_k(&self) -> usize {
        if self.select == 0 {
            DEFAULT_TOP_K
        } else {
            self.select
        }
    }

    pub fn to_value(&self) -> Value {
        serde_json::to_value(self).expect("config serializes")
    }
}

/// Header line of a JSON Lines artifact.
pub fn artifact_header(kind: &str, config: &Value, seed: u64) -> Value {
    json!({ "chemigraph": kind, "version": VERSION, "config": config, "seed": seed })
}

pub fn read_records(path: &Path) -> Result<Vec<MoleculeRecord>> {
    let parsed = read_dataset_file(path)?;
    if parsed.unknown_elements > 0 {
        log::warn!("{}: {} atom(s) with unlisted elements", path.display(), parsed.unknown_elements);
    }
    Ok(parsed.records)
}

/// Records sorted oldest first (stable; undated input keeps its order).
pub fn chronological(records: Vec<MoleculeRecord>) -> Result<Vec<MoleculeRecord>> {
    let order = chronological_order(&records)?;
    let mut slots: Vec<Option<MoleculeRecord>> = records.into_iter().map(Some).collect();
    Ok(order.into_iter().map(|i| slots[i].take().expect("permutation")).collect())
}

fn is_cache(path: &Path) -> Result<bool> {
    let mut magic = [0u8; 8];
    let mut f = crate::error::open_file(path)?;
    Ok(f.read(&mut magic)? == magic.len() && &magic == CACHE_MAGIC)
}

/// Model inputs from a feature cache or a dataset. Datasets are featurized,
/// in chronological order when `chronological` is set and in file order
/// otherwise. Caches are taken as stored.
pub fn load_graphs(path: &Path, options: &FeaturizeOptions, chronological_order: bool) -> Result<Vec<MolGraph>> {
    if is_cache(path)? {
        return Ok(read_cache_file(path)?.1);
    }
    let mut records = read_records(path)?;
    if chronological_order {
        records = chronological(records)?;
    }
    Ok(featurize_all(&records, options))
}

/// `(head, tail)` with the tail holding ⌈n·fraction⌉ items.
pub fn split_tail<T>(mut items: Vec<T>, fraction: f64) -> (Vec<T>, Vec<T>) {
    let n = tail_count(items.len(), fraction);
    let tail = items.split_off(items.len() - n);
    (items, tail)
}

/// Sorted union of the label names in `graphs`.
pub fn infer_tasks(graphs: &[MolGraph]) -> Vec<String> {
    let set: std::collections::BTreeSet<&String> = graphs.iter().flat_map(|g| g.labels.keys()).collect();
    set.into_iter().cloned().collect()
}

/// Training and test partitions per the plan: an explicit test file, or the
/// newest `test_fraction` of the training file.
pub fn partitions(plan: &TrainPlan) -> Result<(Vec<MolGraph>, Vec<MolGraph>)> {
    plan.validate()?;
    let train_path = plan.train.as_ref().ok_or_else(|| Error::Config("train.train (dataset path) is not set".into()))?;
    let graphs = load_graphs(train_path, &plan.featurize, true)?;
    let (train, test) = match &plan.test {
        Some(test) => (graphs, load_graphs(test, &plan.featurize, true)?),
        None => split_tail(graphs, plan.test_fraction),
    };
    if train.is_empty() {
        return Err(Error::EmptyInput(format!("{} holds no training molecules", train_path.display())));
    }
    Ok((train, test))
}

#[derive(Debug, Clone)]
pub struct TrainRun<T> {
    pub outcome: TrainOutcome<T>,
    pub config: ExperimentConfig,
    pub test_metrics: BTreeMap<String, TaskMetrics>,
    pub pool: CandidatePool,
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    Ok(BufWriter::new(File::create(path)?))
}

pub fn write_json(path: &Path, value: &Value) -> Result<()> {
    let mut out = create(path)?;
    serde_json::to_writer_pretty(&mut out, value)?;
    writeln!(out)?;
    out.flush()?;
    Ok(())
}

/// Epoch log: header line, then one record per line.
pub fn write_epoch_log(path: &Path, records: &[EpochRecord], config: &Value, seed: u64) -> Result<()> {
    let mut out = create(path)?;
    serde_json::to_writer(&mut out, &artifact_header("epochs", config, seed))?;
    writeln!(out)?;
    write_records(records, &mut out)?;
    out.flush()?;
    Ok(())
}

/// Trains one model per the config. With `out`, checkpoints go to
/// `out/checkpoints`, and `epochs.jsonl` plus a candidate manifest
/// `pool.json` are written next to them.
pub fn run_training<T: Real>(config: &ExperimentConfig, out: Option<&Path>) -> Result<TrainRun<T>> {
    let mut config = config.clone();
    let (train_set, test_set) = partitions(&config.train)?;
    if config.model.tasks.is_empty() {
        config.model.tasks = infer_tasks(&train_set);
        log::info!("tasks inferred from labels: {:?}", config.model.tasks);
    }
    let resolved = config.to_value();
    let refs: Vec<&MolGraph> = train_set.iter().collect();
    let (fit, val) = validation_split(&refs, config.train.validation_fraction);
    let model = Model::<T>::init(config.model.clone())?;
    let ckpt_dir = out.map(|o| o.join("checkpoints"));
    let outcome = train(&config.train, model, &fit, &val, ckpt_dir.as_deref())?;
    let test_refs: Vec<&MolGraph> = test_set.iter().collect();
    let test_metrics = match evaluate(&outcome.model, &test_refs, config.train.batch_size) {
        Ok(m) => m,
        Err(Error::NoSupervision) => BTreeMap::new(),
        Err(e) => return Err(e),
    };
    let task = if config.ensemble.task.is_empty() { config.model.tasks[0].clone() } else { config.ensemble.task.clone() };
    let pool = CandidatePool::from_records("model", &outcome.records, &task);
    if let Some(dir) = out {
        write_epoch_log(&dir.join("epochs.jsonl"), &outcome.records, &resolved, config.seed())?;
        write_json(&dir.join("pool.json"), &serde_json::to_value(&pool)?)?;
    }
    Ok(TrainRun { outcome, config, test_metrics, pool })
}

/// Prediction file: header line, then one line per molecule in input order.
pub fn write_predictions<W: Write>(mut out: W, preds: &[TaskPrediction], config: &Value, seed: u64) -> Result<()> {
    serde_json::to_writer(&mut out, &artifact_header("predictions", config, seed))?;
    writeln!(out)?;
    for p in preds {
        let values: BTreeMap<&str, f64> = p.tasks.iter().map(String::as_str).zip(p.values.iter().copied()).collect();
        serde_json::to_writer(&mut out, &json!({ "id": p.id, "predictions": values }))?;
        writeln!(out)?;
    }
    Ok(())
}

/// Predictions for a dataset or cache, in file order.
pub fn predict_path<T: Real>(model: &Model<T>, input: &Path, options: &FeaturizeOptions, batch_size: usize) -> Result<Vec<TaskPrediction>> {
    let graphs = load_graphs(input, options, false)?;
    predict(model, &graphs.iter().collect::<Vec<_>>(), batch_size)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub metrics: BTreeMap<String, TaskMetrics>,
    /// Per task, accuracy binned by similarity to the training set.
    pub similarity: BTreeMap<String, SimilarityReport>,
}

impl EvalReport {
    pub fn to_table(&self) -> String {
        let mut out = String::new();
        for (task, m) in &self.metrics {
            let r2 = m.r2.map_or_else(|| "-".to_string(), |v| format!("{v:.4}"));
            out.push_str(&format!("task {task}  n {}  rmse {:.4}  r2 {r2}\n", m.n, m.rmse));
            if let Some(s) = self.similarity.get(task) {
                out.push_str(&s.to_table());
            }
        }
        out
    }
}

/// Test metrics and the similarity analysis of `test` against `train`.
pub fn evaluate_records<T: Real>(
    model: &Model<T>,
    train: &[MoleculeRecord],
    test: &[MoleculeRecord],
    config: &ExperimentConfig,
) -> Result<EvalReport> {
    let graphs = featurize_all(test, &config.train.featurize);
    let refs: Vec<&MolGraph> = graphs.iter().collect();
    let metrics = evaluate(model, &refs, config.train.batch_size)?;
    let preds = predict(model, &refs, config.train.batch_size)?;
    let fp = |r: &[MoleculeRecord]| r.iter().map(|m| fingerprint(m, config.eval.radius, config.eval.width)).collect::<Result<Vec<_>>>();
    let (train_fp, test_fp) = (fp(train)?, fp(test)?);
    let mut similarity = BTreeMap::new();
    for (t, task) in model.tasks().iter().enumerate() {
        let values: Vec<f64> = preds.iter().map(|p| p.values[t]).collect();
        let labels: Vec<Option<f64>> = graphs.iter().map(|g| g.labels.get(task).copied()).collect();
        similarity.insert(task.clone(), similarity_report(&train_fp, &test_fp, &values, &labels, &config.eval.edges)?);
    }
    Ok(EvalReport { metrics, similarity })
}

/// Trains each default candidate configuration into `out/<config id>` and
/// pools their checkpointed epochs.
pub fn run_candidates<T: Real>(config: &ExperimentConfig, out: &Path) -> Result<CandidatePool> {
    let mut all = Vec::new();
    for (id, model) in default_candidate_configs(&config.model) {
        let cfg = ExperimentConfig { model, ..config.clone() };
        let run = run_training::<T>(&cfg, Some(&out.join(&id)))?;
        all.extend(CandidatePool::from_records(&id, &run.outcome.records, &ensemble_task(&run.config)).candidates);
    }
    CandidatePool::new(all)
}

fn ensemble_task(config: &ExperimentConfig) -> String {
    if config.ensemble.task.is_empty() {
        config.model.tasks.first().cloned().unwrap_or_default()
    } else {
        config.ensemble.task.clone()
    }
}

/// Selects `config.select_k()` members of `pool` and trains the ensemble on
/// the same partitions as training. With `out`, writes `ensemble.ckpt` and
/// `finetune.jsonl` there.
pub fn run_finetune<T: Real>(config: &ExperimentConfig, pool: &CandidatePool, out: Option<&Path>) -> Result<FinetuneOutcome<T>> {
    let selected = select_models(pool, config.select_k())?;
    let (train_set, _) = partitions(&config.train)?;
    let refs: Vec<&MolGraph> = train_set.iter().collect();
    let (fit, val) = validation_split(&refs, config.train.validation_fraction);
    let mut ens_config = config.ensemble.clone();
    if ens_config.task.is_empty() {
        let first: Model<T> = crate::trainer::load_model(&selected.candidates[0].checkpoint)
            .map_err(|e| Error::MemberLoad { path: selected.candidates[0].checkpoint.display().to_string(), msg: e.to_string() })?;
        ens_config.task = first.tasks()[0].clone();
    }
    let ens = EnsembleModel::<T>::init(ens_config.clone(), &selected)?;
    let outcome = train_finetune(ens, &config.train, &fit, &val)?;
    if let Some(dir) = out {
        let resolved = ExperimentConfig { ensemble: ens_config, ..config.clone() }.to_value();
        std::fs::create_dir_all(dir)?;
        let mut archive = outcome.ensemble.to_archive(config.seed());
        archive.config["config"] = resolved.clone();
        archive.write_file(&dir.join("ensemble.ckpt"))?;
        write_epoch_log(&dir.join("finetune.jsonl"), &outcome.records, &resolved, config.seed())?;
    }
    Ok(outcome)
}

/// Rendered batch plan of the first `batch_size` molecules of `graphs`.
pub fn batch_plan<T: Real>(model: &Model<T>, graphs: &[MolGraph], batch_size: usize, mode: BnMode) -> Result<String> {
    let refs: Vec<&MolGraph> = graphs.iter().take(batch_size.max(1)).collect();
    if refs.is_empty() {
        return Err(Error::EmptyInput("no molecules to plan".into()));
    }
    let targets = model.targets(&refs);
    let with_loss = mode == BnMode::Train && targets.iter().flatten().any(Option::is_some);
    let batch = build_instance_graphs(model, &refs, mode, with_loss.then_some(&targets[..]))?;
    Ok(render_plan(&compile_batch(&batch.graph)?))
}
