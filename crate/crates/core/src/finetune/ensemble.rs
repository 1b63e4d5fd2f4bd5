use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::json;

use super::{Candidate, CandidatePool};
use crate::batcher::{compile_batch, execute_schedule};
use crate::engine::{
    backward, glorot_uniform, AdamState, Archive, Axis, BnMode, ComputationGraph, Feeds, NodeId, ParamId, ParamStore,
    Real, ReduceKind, Tensor,
};
use crate::error::{Error, Result};
use crate::evalkit::{regression_metrics, TaskMetrics};
use crate::featurize::MolGraph;
use crate::model::{append_loss, build_instance_graphs, pool, run_batch, Execution, LabelNorm, Model, Pooling};
use crate::trainer::{EpochRecord, TrainPlan, VERSION};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EnsembleConfig {
    /// Task the ensemble predicts; every member must carry it.
    pub task: String,
    /// Hidden widths of each member's encoder. Empty passes the member's
    /// `[embedding, score]` row through unchanged.
    pub encoder: Vec<usize>,
    pub reduction: Pooling,
    pub explicit_width: usize,
    /// Hidden widths of the final perceptron before its linear output.
    pub head: Vec<usize>,
    pub alpha: f64,
    pub seed: u64,
    /// Start from the mean member score: two units per layer carry `±score`
    /// through the encoders, the average (or sum) reduction and the head.
    pub score_passthrough: bool,
}

impl Default for EnsembleConfig {
    fn default() -> Self {
        EnsembleConfig {
            task: String::new(),
            encoder: vec![64],
            reduction: Pooling::MaxSumAvg,
            explicit_width: 0,
            head: vec![64],
            alpha: 0.01,
            seed: 0,
            score_passthrough: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleLayout {
    /// Per member, the (weight, bias) of each encoder layer.
    pub encoders: Vec<Vec<(ParamId, ParamId)>>,
    pub head: Vec<(ParamId, ParamId)>,
    pub output: (ParamId, ParamId),
}

/// Trainable combiner over frozen member models, members in canonical order.
#[derive(Debug, Clone)]
pub struct EnsembleModel<T> {
    pub config: EnsembleConfig,
    pub members: Vec<Candidate>,
    pub member_models: Vec<Model<T>>,
    pub params: ParamStore<T>,
    pub layout: EnsembleLayout,
    pub label_norm: LabelNorm,
    /// Per member and column, the scaling applied to `[embedding, score]`
    /// rows before encoding. Fitted on the fine-tuning training rows.
    pub input_norm: Vec<Vec<LabelNorm>>,
}

fn load_member<T: Real>(c: &Candidate, task: &str) -> Result<Model<T>> {
    let fail = |msg: String| Error::MemberLoad { path: c.checkpoint.display().to_string(), msg };
    let archive = Archive::read_file(&c.checkpoint).map_err(|e| fail(e.to_string()))?;
    let model: Model<T> = Model::from_archive(&archive).map_err(|e| fail(e.to_string()))?;
    if !model.tasks().iter().any(|t| t == task) {
        return Err(fail(format!("model does not predict task '{task}'")));
    }
    Ok(model)
}

/// Width of a member's `[embedding, score]` row.
fn member_width<T>(m: &Model<T>) -> usize {
    m.config.embedding_width() + 1
}

impl<T: Real> EnsembleModel<T> {
    /// Loads every member of `pool` and initializes the combiner.
    pub fn init(config: EnsembleConfig, pool: &CandidatePool) -> Result<Self> {
        let members = pool.canonical();
        let models = members.iter().map(|c| load_member(c, &config.task)).collect::<Result<Vec<_>>>()?;
        Self::with_members(config, members, models)
    }

    /// Initializes the combiner over already loaded members, given in
    /// canonical order.
    pub fn with_members(config: EnsembleConfig, members: Vec<Candidate>, models: Vec<Model<T>>) -> Result<Self> {
        if models.is_empty() || members.len() != models.len() {
            return Err(Error::EmptyInput("an ensemble needs at least one member".into()));
        }
        if !(config.alpha >= 0.0) || config.encoder.contains(&0) || config.head.contains(&0) {
            return Err(Error::Config(format!("invalid ensemble config {config:?}")));
        }
        let widths: Vec<usize> = models.iter().map(member_width).collect();
        let encoded = match config.encoder.last() {
            Some(&w) => w,
            None => {
                if widths.iter().any(|&w| w != widths[0]) {
                    return Err(Error::Config("a pass-through encoder needs equal member embedding widths".into()));
                }
                widths[0]
            }
        };
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut p = ParamStore::new();
        let mut dense = |p: &mut ParamStore<T>, name: String, fan_in: usize, fan_out: usize| {
            let w = p.add(format!("{name}.weight"), glorot_uniform(&mut rng, fan_in, fan_out), true);
            let b = p.add(format!("{name}.bias"), Tensor::zeros(1, fan_out), true);
            (w, b)
        };
        let mut encoders = Vec::new();
        for (j, &w) in widths.iter().enumerate() {
            let mut fan_in = w;
            let mut layers = Vec::new();
            for (i, &h) in config.encoder.iter().enumerate() {
                layers.push(dense(&mut p, format!("member{j}.enc{i}"), fan_in, h));
                fan_in = h;
            }
            encoders.push(layers);
        }
        let mut fan_in = encoded * config.reduction.kinds().len() + config.explicit_width;
        let mut head = Vec::new();
        for (i, &h) in config.head.iter().enumerate() {
            head.push(dense(&mut p, format!("head{i}"), fan_in, h));
            fan_in = h;
        }
        let output = dense(&mut p, "output".into(), fan_in, 1);
        let mut ens = EnsembleModel {
            config,
            members,
            member_models: models,
            params: p,
            layout: EnsembleLayout { encoders, head, output },
            label_norm: LabelNorm::default(),
            input_norm: widths.iter().map(|&w| vec![LabelNorm::default(); w]).collect(),
        };
        if ens.config.score_passthrough {
            ens.init_score_passthrough(&widths, encoded);
        }
        Ok(ens)
    }

    /// Rewrites the weights into units 0 and 1 of every hidden layer, and the
    /// output, so the untrained ensemble emits the mean member score. A pair
    /// of leaky units `(f(s), f(-s))` represents `s = (u0 - u1) / (1 + α)`.
    fn init_score_passthrough(&mut self, widths: &[usize], encoded: usize) {
        let kinds = self.config.reduction.kinds();
        let Some(block) = kinds.iter().position(|&k| k == ReduceKind::Avg).or_else(|| kinds.iter().position(|&k| k == ReduceKind::Sum))
        else {
            return;
        };
        if self.config.encoder.iter().chain(&self.config.head).any(|&w| w < 2) {
            return;
        }
        let pair = 1.0 / (1.0 + self.config.alpha);
        // Each source is a list of (input column, coefficient) whose weighted sum is the score.
        let route = |params: &mut ParamStore<T>, (w, b): (ParamId, ParamId), source: &[(usize, f64)], units: usize| {
            let [rows, cols] = params.get(w).shape();
            let mut data = params.get(w).to_f64_vec();
            for r in 0..rows {
                for u in 0..units.min(cols) {
                    data[r * cols + u] = 0.0;
                }
            }
            for &(r, c) in source {
                data[r * cols] = c;
                if units == 2 {
                    data[r * cols + 1] = -c;
                }
            }
            *params.get_mut(w) = Tensor::from_f64(rows, cols, &data);
            let mut bias = params.get(b).to_f64_vec();
            bias[..units.min(cols)].iter_mut().for_each(|v| *v = 0.0);
            *params.get_mut(b) = Tensor::from_f64(1, cols, &bias);
        };
        let from_pair = |offset: usize, scale: f64| vec![(offset, scale * pair), (offset + 1, -scale * pair)];
        for (layers, &w) in self.layout.encoders.iter().zip(widths) {
            let mut source = vec![(w - 1, 1.0)];
            for &layer in layers {
                route(&mut self.params, layer, &source, 2);
                source = from_pair(0, 1.0);
            }
        }
        let k = self.members.len() as f64;
        let scale = if kinds[block] == ReduceKind::Avg { 1.0 } else { 1.0 / k };
        let offset = block * encoded;
        let mut source: Vec<(usize, f64)> = if self.config.encoder.is_empty() {
            vec![(offset + encoded - 1, scale)]
        } else {
            from_pair(offset, scale)
        };
        for &layer in &self.layout.head.clone() {
            route(&mut self.params, layer, &source, 2);
            source = from_pair(0, 1.0);
        }
        route(&mut self.params, self.layout.output, &source, 1);
    }

    /// Width of the reduced member representation; independent of member count.
    pub fn reduced_width(&self) -> usize {
        let encoded = self.config.encoder.last().copied().unwrap_or_else(|| member_width(&self.member_models[0]));
        encoded * self.config.reduction.kinds().len()
    }

    /// Inference-mode `[embedding, score]` rows of every member for each
    /// molecule: `out[molecule][member]`. Scores are the member's raw
    /// (normalized-unit) output for the ensemble task.
    pub fn member_rows(&self, mols: &[&MolGraph], batch_size: usize) -> Result<Vec<Vec<Vec<f64>>>> {
        let per_member: Vec<Vec<Vec<f64>>> = self
            .member_models
            .par_iter()
            .map(|m| {
                let t = m.tasks().iter().position(|t| *t == self.config.task).expect("checked at load");
                let mut rows = Vec::with_capacity(mols.len());
                for chunk in mols.chunks(batch_size.max(1)) {
                    let batch = build_instance_graphs(m, chunk, BnMode::Infer, None)?;
                    let run = run_batch(m, batch, Execution::Batched, false)?;
                    for (mut emb, z) in run.embeddings.into_iter().zip(run.predictions) {
                        emb.push(z[t]);
                        rows.push(emb);
                    }
                }
                Ok(rows)
            })
            .collect::<Result<_>>()?;
        Ok((0..mols.len()).map(|i| per_member.iter().map(|rows| rows[i].clone()).collect()).collect())
    }

    fn explicit_of(&self, mol: &MolGraph) -> Result<Option<Vec<f64>>> {
        let want = self.config.explicit_width;
        if want == 0 {
            return Ok(None);
        }
        match &mol.explicit {
            Some(v) if v.len() == want => Ok(Some(v.clone())),
            Some(v) => Err(Error::WidthMismatch { expected: want, found: v.len() }),
            None => Err(Error::WidthMismatch { expected: want, found: 0 }),
        }
    }

    /// One instance per molecule: encode each member row, reduce over
    /// members, append explicit features, then the final perceptron.
    fn build(
        &self,
        rows: &[&Vec<Vec<f64>>],
        explicit: &[Option<Vec<f64>>],
        targets: Option<&[Vec<Option<f64>>]>,
    ) -> Result<(ComputationGraph, Feeds<T>, Vec<NodeId>, Option<NodeId>)> {
        let mut g = ComputationGraph::for_params(&self.params);
        let mut feeds = Feeds::new();
        let mut preds = Vec::with_capacity(rows.len());
        let alpha = self.config.alpha;
        for (inst, (member_rows, extra)) in rows.iter().zip(explicit).enumerate() {
            g.set_instance(Some(inst));
            let mut encoded = Vec::with_capacity(member_rows.len());
            for ((row, layers), norm) in member_rows.iter().zip(&self.layout.encoders).zip(&self.input_norm) {
                let scaled: Vec<f64> = row.iter().zip(norm).map(|(&v, n)| n.apply(v)).collect();
                let mut x = g.input(1, row.len());
                feeds.insert(x, Tensor::from_f64(1, row.len(), &scaled));
                for &(w, b) in layers {
                    x = g.matmul(x, w)?;
                    x = g.add_bias(x, b)?;
                    x = g.leaky_relu(x, alpha)?;
                }
                encoded.push(x);
            }
            let stacked = if encoded.len() == 1 { encoded[0] } else { g.concat(Axis::Rows, &encoded)? };
            let mut x = pool(&mut g, stacked, encoded.len(), self.config.reduction.kinds())?;
            if let Some(v) = extra {
                let e = g.input(1, v.len());
                feeds.insert(e, Tensor::from_f64(1, v.len(), v));
                x = g.concat(Axis::Cols, &[x, e])?;
            }
            for &(w, b) in &self.layout.head {
                x = g.matmul(x, w)?;
                x = g.add_bias(x, b)?;
                x = g.leaky_relu(x, alpha)?;
            }
            let (w, b) = self.layout.output;
            x = g.matmul(x, w)?;
            preds.push(g.add_bias(x, b)?);
        }
        g.set_instance(None);
        let loss = match targets {
            Some(t) => Some(append_loss(&mut g, &mut feeds, &preds, t, vec![1.0])?),
            None => None,
        };
        Ok((g, feeds, preds, loss))
    }

    /// Normalized-unit outputs for precomputed member rows, with gradients
    /// of the loss when targets are given.
    fn run(
        &self,
        rows: &[&Vec<Vec<f64>>],
        explicit: &[Option<Vec<f64>>],
        targets: Option<&[Vec<Option<f64>>]>,
    ) -> Result<(Vec<f64>, Option<(f64, Option<Vec<Tensor<T>>>)>)> {
        let (graph, feeds, preds, loss) = self.build(rows, explicit, targets)?;
        let schedule = compile_batch(&graph)?;
        let run = execute_schedule(&schedule, &self.params, feeds)?;
        let out = preds.iter().map(|&p| run.value(&schedule, p).item().as_f64()).collect();
        let loss = match loss {
            Some(l) => {
                let value = run.value(&schedule, l).item().as_f64();
                let grads = if run.values.first_non_finite.is_none() {
                    let step = schedule
                        .step_of(l)
                        .ok_or_else(|| Error::InvalidGraph("loss value is not a whole step".into()))?;
                    Some(backward(&run.graph, &self.params, &run.values, step)?.params)
                } else {
                    None
                };
                Some((value, grads))
            }
            None => None,
        };
        Ok((out, loss))
    }

    fn predict_rows(&self, mols: &[&MolGraph], rows: &[Vec<Vec<f64>>], batch_size: usize) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(mols.len());
        let idx: Vec<usize> = (0..mols.len()).collect();
        for chunk in idx.chunks(batch_size.max(1)) {
            let r: Vec<&Vec<Vec<f64>>> = chunk.iter().map(|&i| &rows[i]).collect();
            let e = chunk.iter().map(|&i| self.explicit_of(mols[i])).collect::<Result<Vec<_>>>()?;
            let (z, _) = self.run(&r, &e, None)?;
            out.extend(z.into_iter().map(|v| self.label_norm.invert(v)));
        }
        Ok(out)
    }

    /// Combiner parameters plus the member references; members are reloaded
    /// from their checkpoints.
    pub fn to_archive(&self, seed: u64) -> Archive {
        let mut a = Archive::new(json!({
            "kind": "ensemble",
            "version": VERSION,
            "seed": seed,
            "ensemble": self.config,
            "members": self.members,
            "label_norm": self.label_norm,
            "input_norm": self.input_norm,
        }));
        for p in self.params.entries() {
            a.push_tensor(p.name.clone(), &p.value);
        }
        a
    }

    pub fn from_archive(archive: &Archive) -> Result<Self> {
        let cfg = &archive.config;
        if cfg["kind"] != "ensemble" {
            return Err(Error::Checkpoint("archive does not hold an ensemble".into()));
        }
        let parse = |key: &str| cfg[key].clone();
        let config: EnsembleConfig =
            serde_json::from_value(parse("ensemble")).map_err(|e| Error::Checkpoint(format!("ensemble config: {e}")))?;
        let members: Vec<Candidate> =
            serde_json::from_value(parse("members")).map_err(|e| Error::Checkpoint(format!("members: {e}")))?;
        let mut ens = Self::init(config, &CandidatePool { candidates: members })?;
        ens.label_norm =
            serde_json::from_value(parse("label_norm")).map_err(|e| Error::Checkpoint(format!("label scaling: {e}")))?;
        let input_norm: Vec<Vec<LabelNorm>> =
            serde_json::from_value(parse("input_norm")).map_err(|e| Error::Checkpoint(format!("input scaling: {e}")))?;
        if input_norm.iter().map(Vec::len).ne(ens.input_norm.iter().map(Vec::len)) {
            return Err(Error::Checkpoint("input scaling does not match the members".into()));
        }
        ens.input_norm = input_norm;
        for id in 0..ens.params.len() {
            let name = ens.params.entry(id).name.clone();
            let t: Tensor<T> = archive.tensor(&name)?;
            if t.shape() != ens.params.get(id).shape() {
                return Err(Error::Checkpoint(format!("'{name}' has the wrong shape")));
            }
            *ens.params.get_mut(id) = t;
        }
        Ok(ens)
    }
}

/// Label-unit ensemble predictions in input order.
pub fn ensemble_predict<T: Real>(ens: &EnsembleModel<T>, mols: &[&MolGraph], batch_size: usize) -> Result<Vec<f64>> {
    let rows = ens.member_rows(mols, batch_size)?;
    ens.predict_rows(mols, &rows, batch_size)
}

#[derive(Debug, Clone)]
pub struct FinetuneOutcome<T> {
    pub ensemble: EnsembleModel<T>,
    pub records: Vec<EpochRecord>,
    pub step_losses: Vec<f64>,
}

fn task_metrics(task: &str, mols: &[&MolGraph], pred: &[f64]) -> BTreeMap<String, TaskMetrics> {
    let (p, y): (Vec<f64>, Vec<f64>) =
        mols.iter().zip(pred).filter_map(|(m, &p)| m.labels.get(task).map(|&y| (p, y))).unzip();
    regression_metrics(&p, &y).map(|m| (task.to_string(), m)).into_iter().collect()
}

/// Trains the combiner with the trainer's loss and optimizer; member
/// parameters are never touched.
pub fn train_finetune<T: Real>(
    mut ens: EnsembleModel<T>,
    plan: &TrainPlan,
    train: &[&MolGraph],
    validation: &[&MolGraph],
) -> Result<FinetuneOutcome<T>> {
    plan.validate()?;
    let task = ens.config.task.clone();
    let labels: Vec<f64> = train.iter().filter_map(|m| m.labels.get(&task).copied()).collect();
    if labels.is_empty() {
        return Err(Error::Config(format!("task '{task}' has no labels in the training set")));
    }
    ens.label_norm = LabelNorm::fit(&labels);
    let train_rows = ens.member_rows(train, plan.batch_size)?;
    ens.input_norm = (0..ens.members.len())
        .map(|j| {
            let width = ens.input_norm[j].len();
            // the score column stays in the member's own units
            (0..width - 1)
                .map(|c| LabelNorm::fit(&train_rows.iter().map(|r| r[j][c]).collect::<Vec<_>>()))
                .chain([LabelNorm::default()])
                .collect()
        })
        .collect();
    let val_rows = ens.member_rows(validation, plan.batch_size)?;
    let explicit = train.iter().map(|m| ens.explicit_of(m)).collect::<Result<Vec<_>>>()?;
    let targets: Vec<Vec<Option<f64>>> =
        train.iter().map(|m| vec![m.labels.get(&task).map(|&y| ens.label_norm.apply(y))]).collect();

    let mut adam = AdamState::new(plan.adam, &ens.params);
    let mut rng = ChaCha8Rng::seed_from_u64(plan.seed);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut records = Vec::with_capacity(plan.epochs);
    let mut step_losses = Vec::new();
    for epoch in 1..=plan.epochs {
        order.shuffle(&mut rng);
        let mut losses = Vec::new();
        for chunk in order.chunks(plan.batch_size) {
            let t: Vec<Vec<Option<f64>>> = chunk.iter().map(|&i| targets[i].clone()).collect();
            if t.iter().all(|r| r[0].is_none()) {
                continue;
            }
            let r: Vec<&Vec<Vec<f64>>> = chunk.iter().map(|&i| &train_rows[i]).collect();
            let e: Vec<Option<Vec<f64>>> = chunk.iter().map(|&i| explicit[i].clone()).collect();
            let step = step_losses.len();
            let (_, loss) = ens.run(&r, &e, Some(&t))?;
            let (loss, grads) = loss.expect("targets were given");
            let Some(grads) = grads.filter(|_| loss.is_finite()) else {
                return Err(Error::Divergence { step });
            };
            adam.step(&mut ens.params, &grads);
            step_losses.push(loss);
            losses.push(loss);
        }
        let train_loss = if losses.is_empty() { 0.0 } else { losses.iter().sum::<f64>() / losses.len() as f64 };
        let validation_metrics = if validation.is_empty() {
            BTreeMap::new()
        } else {
            task_metrics(&task, validation, &ens.predict_rows(validation, &val_rows, plan.batch_size)?)
        };
        log::info!("finetune epoch {epoch} loss {train_loss:.5}");
        records.push(EpochRecord { epoch, train_loss, validation: validation_metrics, checkpoint: None });
    }
    Ok(FinetuneOutcome { ensemble: ens, records, step_losses })
}
