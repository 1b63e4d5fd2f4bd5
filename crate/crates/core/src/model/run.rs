use crate::batcher::{compile_batch, execute_schedule};
use crate::engine::{backward, forward, BnBatchStats, BnMode, NodeId, Real, Tensor};
use crate::error::{Error, Result};
use crate::featurize::MolGraph;

use super::{build_instance_graphs, BatchGraph, Model};

/// How a batch graph is evaluated.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Execution {
    /// Through the batching compiler.
    Batched,
    /// Node by node on the unmerged graph.
    Reference,
}

/// Outputs of one batch evaluation. Predictions are in normalized label units.
#[derive(Debug, Clone)]
pub struct BatchRun<T> {
    pub predictions: Vec<Vec<f64>>,
    pub embeddings: Vec<Vec<f64>>,
    pub loss: Option<f64>,
    /// Parameter gradients, when requested and every value is finite.
    pub grads: Option<Vec<Tensor<T>>>,
    pub bn_stats: Vec<BnBatchStats<T>>,
    pub invocations: usize,
    pub non_finite: bool,
}

/// Evaluates `batch`, optionally with parameter gradients of its loss.
pub fn run_batch<T: Real>(
    model: &Model<T>,
    batch: BatchGraph<T>,
    exec: Execution,
    gradients: bool,
) -> Result<BatchRun<T>> {
    let BatchGraph { graph, feeds, embeddings, predictions, loss, .. } = batch;
    let rows = |t: Tensor<T>| t.to_f64_vec();
    let collect = |get: &dyn Fn(NodeId) -> Tensor<T>, ids: &[NodeId]| ids.iter().map(|&i| rows(get(i))).collect();
    let (preds, embs, loss_value, grads, values_meta) = match exec {
        Execution::Reference => {
            let values = forward(&graph, &model.params, feeds)?;
            let get = |i: NodeId| values.get(i).clone();
            let preds: Vec<Vec<f64>> = collect(&get, &predictions);
            let embs: Vec<Vec<f64>> = collect(&get, &embeddings);
            let lv = loss.map(|l| values.get(l).item().as_f64());
            let grads = match loss {
                Some(l) if gradients && values.first_non_finite.is_none() => {
                    Some(backward(&graph, &model.params, &values, l)?.params)
                }
                _ => None,
            };
            (preds, embs, lv, grads, (values.bn_stats, values.invocations, values.first_non_finite.is_some()))
        }
        Execution::Batched => {
            let schedule = compile_batch(&graph)?;
            let run = execute_schedule(&schedule, &model.params, feeds)?;
            let get = |i: NodeId| run.value(&schedule, i);
            let preds: Vec<Vec<f64>> = collect(&get, &predictions);
            let embs: Vec<Vec<f64>> = collect(&get, &embeddings);
            let lv = loss.map(|l| get(l).item().as_f64());
            let grads = match loss {
                Some(l) if gradients && run.values.first_non_finite.is_none() => {
                    let step = schedule
                        .step_of(l)
                        .ok_or_else(|| Error::InvalidGraph("loss value is not a whole step".into()))?;
                    Some(backward(&run.graph, &model.params, &run.values, step)?.params)
                }
                _ => None,
            };
            let v = run.values;
            (preds, embs, lv, grads, (v.bn_stats, v.invocations, v.first_non_finite.is_some()))
        }
    };
    let (bn_stats, invocations, non_finite) = values_meta;
    Ok(BatchRun { predictions: preds, embeddings: embs, loss: loss_value, grads, bn_stats, invocations, non_finite })
}

/// Task outputs of one molecule, in label units, with the shared embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskPrediction {
    pub id: String,
    pub tasks: Vec<String>,
    pub values: Vec<f64>,
    pub embedding: Vec<f64>,
}

impl TaskPrediction {
    pub fn get(&self, task: &str) -> Option<f64> {
        self.tasks.iter().position(|t| t == task).map(|i| self.values[i])
    }
}

/// Inference-mode predictions in input order, evaluated `batch_size`
/// molecules at a time.
pub fn predict<T: Real>(model: &Model<T>, mols: &[&MolGraph], batch_size: usize) -> Result<Vec<TaskPrediction>> {
    let mut out = Vec::with_capacity(mols.len());
    for chunk in mols.chunks(batch_size.max(1)) {
        let batch = build_instance_graphs(model, chunk, BnMode::Infer, None)?;
        let run = run_batch(model, batch, Execution::Batched, false)?;
        for ((mol, z), emb) in chunk.iter().zip(run.predictions).zip(run.embeddings) {
            let values = z.iter().zip(&model.label_norm).map(|(&v, n)| n.invert(v)).collect();
            out.push(TaskPrediction { id: mol.id.clone(), tasks: model.config.tasks.clone(), values, embedding: emb });
        }
    }
    Ok(out)
}

/// `Σ_t w_t · RMSE_t`, each RMSE over the molecules labeled for task `t`;
/// tasks without labels contribute 0.
pub fn multi_task_loss(predictions: &[Vec<f64>], labels: &[Vec<Option<f64>>], weights: &[f64]) -> Result<f64> {
    if predictions.len() != labels.len() {
        return Err(Error::InvalidGraph(format!("{} predictions for {} label rows", predictions.len(), labels.len())));
    }
    let mut loss = 0.0;
    let mut supervised = false;
    for (t, &w) in weights.iter().enumerate() {
        let (mut sse, mut n) = (0.0, 0usize);
        for (p, l) in predictions.iter().zip(labels) {
            if let Some(y) = l[t] {
                sse += (p[t] - y).powi(2);
                n += 1;
            }
        }
        if n > 0 {
            supervised = true;
            loss += w * (sse / n as f64).sqrt();
        }
    }
    if !supervised {
        return Err(Error::NoSupervision);
    }
    Ok(loss)
}
