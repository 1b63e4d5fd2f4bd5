//! The graph convolutional network: stacked convolution layers with
//! max/sum/avg neighbor reduction and a residual concat, batch norm over all
//! atom rows of a batch, order-independent pooling and a fully connected head
//! with one linear output per task.

mod build;
mod config;
mod run;

pub(crate) use build::append_loss;
pub use build::{build_instance_graphs, conv_reduce, normalize_reduction, pool, BatchGraph};
pub use config::{ModelConfig, Pooling};
pub use run::{multi_task_loss, predict, run_batch, BatchRun, Execution, TaskPrediction};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::engine::{glorot_uniform, Archive, ParamId, ParamStore, Real, Tensor};
use crate::error::{Error, Result};
use crate::featurize::{MolGraph, ATOM_WIDTH, PAIR_WIDTH};

/// Parameter ids of one convolution layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvParams {
    pub weight: ParamId,
    pub bias: ParamId,
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Layout {
    pub conv: Vec<ConvParams>,
    /// `(weight, bias)` per hidden head layer.
    pub head: Vec<(ParamId, ParamId)>,
    pub output: (ParamId, ParamId),
}

/// Affine label scaling: the network regresses `(y − mean) / std`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LabelNorm {
    pub mean: f64,
    pub std: f64,
}

impl Default for LabelNorm {
    fn default() -> Self {
        LabelNorm { mean: 0.0, std: 1.0 }
    }
}

impl LabelNorm {
    /// Mean and standard deviation of `values`; a zero spread falls back to 1.
    pub fn fit(values: &[f64]) -> Self {
        if values.is_empty() {
            return LabelNorm::default();
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        let std = if var.sqrt() > 1e-12 { var.sqrt() } else { 1.0 };
        LabelNorm { mean, std }
    }

    pub fn apply(&self, y: f64) -> f64 {
        (y - self.mean) / self.std
    }

    pub fn invert(&self, z: f64) -> f64 {
        z * self.std + self.mean
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model<T> {
    pub config: ModelConfig,
    pub params: ParamStore<T>,
    pub layout: Layout,
    pub label_norm: Vec<LabelNorm>,
}

impl<T: Real> Model<T> {
    /// Glorot-uniform weights from `config.seed`, zero biases, identity batch
    /// norm and unit running variance.
    pub fn init(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut p = ParamStore::new();
        let widths = config.atom_widths();
        let mut conv = Vec::new();
        for (k, d) in config.layer_widths().into_iter().enumerate() {
            let fan_in = widths[k] + PAIR_WIDTH;
            let r = 3 * d;
            conv.push(ConvParams {
                weight: p.add(format!("conv{k}.weight"), glorot_uniform(&mut rng, fan_in, d), true),
                bias: p.add(format!("conv{k}.bias"), Tensor::zeros(1, d), true),
                gamma: p.add(format!("conv{k}.bn.gamma"), Tensor::from_f64(1, r, &vec![1.0; r]), true),
                beta: p.add(format!("conv{k}.bn.beta"), Tensor::zeros(1, r), true),
                running_mean: p.add(format!("conv{k}.bn.running_mean"), Tensor::zeros(1, r), false),
                running_var: p.add(format!("conv{k}.bn.running_var"), Tensor::from_f64(1, r, &vec![1.0; r]), false),
            });
        }
        let mut fan_in = config.embedding_width() + config.explicit_width;
        let mut head = Vec::new();
        for (i, &h) in config.head.iter().enumerate() {
            let w = p.add(format!("head{i}.weight"), glorot_uniform(&mut rng, fan_in, h), true);
            let b = p.add(format!("head{i}.bias"), Tensor::zeros(1, h), true);
            head.push((w, b));
            fan_in = h;
        }
        let tasks = config.tasks.len();
        let output = (
            p.add("output.weight", glorot_uniform(&mut rng, fan_in, tasks), true),
            p.add("output.bias", Tensor::zeros(1, tasks), true),
        );
        let label_norm = vec![LabelNorm::default(); tasks];
        Ok(Model { config, params: p, layout: Layout { conv, head, output }, label_norm })
    }

    pub fn tasks(&self) -> &[String] {
        &self.config.tasks
    }

    /// Normalized labels of `mols` in task order; `None` where a task is
    /// unlabeled.
    pub fn targets(&self, mols: &[&MolGraph]) -> Vec<Vec<Option<f64>>> {
        mols.iter()
            .map(|m| {
                self.config
                    .tasks
                    .iter()
                    .zip(&self.label_norm)
                    .map(|(t, n)| m.labels.get(t).map(|&y| n.apply(y)))
                    .collect()
            })
            .collect()
    }

    /// Fits the label scaling to the labeled values of `mols`.
    pub fn fit_label_norm(&mut self, mols: &[&MolGraph]) {
        self.label_norm = self
            .config
            .tasks
            .iter()
            .map(|t| LabelNorm::fit(&mols.iter().filter_map(|m| m.labels.get(t).copied()).collect::<Vec<_>>()))
            .collect();
    }

    /// Config, label scaling and every named parameter.
    pub fn to_archive(&self) -> Archive {
        let mut a = Archive::new(json!({
            "kind": "model",
            "model": self.config,
            "label_norm": self.label_norm,
            "atom_width": ATOM_WIDTH,
            "pair_width": PAIR_WIDTH,
        }));
        for p in self.params.entries() {
            a.push_tensor(p.name.clone(), &p.value);
        }
        a
    }

    pub fn from_archive(archive: &Archive) -> Result<Self> {
        let cfg = &archive.config;
        let config: ModelConfig = serde_json::from_value(cfg["model"].clone())
            .map_err(|e| Error::Checkpoint(format!("model config: {e}")))?;
        for (key, expected) in [("atom_width", ATOM_WIDTH), ("pair_width", PAIR_WIDTH)] {
            let found = cfg[key].as_u64().unwrap_or(0) as usize;
            if found != expected {
                return Err(Error::WidthMismatch { expected, found });
            }
        }
        let mut model = Model::init(config)?;
        model.label_norm = serde_json::from_value(cfg["label_norm"].clone())
            .map_err(|e| Error::Checkpoint(format!("label scaling: {e}")))?;
        if model.label_norm.len() != model.config.tasks.len() {
            return Err(Error::Checkpoint("label scaling does not match the task list".into()));
        }
        for id in 0..model.params.len() {
            let name = model.params.entry(id).name.clone();
            let t: Tensor<T> = archive.tensor(&name)?;
            let want = model.params.get(id).shape();
            if t.shape() != want {
                return Err(Error::Checkpoint(format!("'{name}' has shape {:?}, expected {want:?}", t.shape())));
            }
            *model.params.get_mut(id) = t;
        }
        Ok(model)
    }

    pub fn cast<U: Real>(&self) -> Model<U> {
        Model {
            config: self.config.clone(),
            params: self.params.cast(),
            layout: self.layout.clone(),
            label_norm: self.label_norm.clone(),
        }
    }
}

#[cfg(test)]
mod tests;
