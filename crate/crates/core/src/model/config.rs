use serde::{Deserialize, Serialize};

use crate::engine::ReduceKind;
use crate::error::{Error, Result};
use crate::featurize::ATOM_WIDTH;

/// Order-independent reduction over atoms into the molecule embedding.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pooling {
    #[default]
    MaxSumAvg,
    Sum,
    Avg,
}

impl Pooling {
    pub fn kinds(self) -> &'static [ReduceKind] {
        match self {
            Pooling::MaxSumAvg => &ReduceKind::ALL,
            Pooling::Sum => &[ReduceKind::Sum],
            Pooling::Avg => &[ReduceKind::Avg],
        }
    }
}

/// Network shape and task setup. Serialized into checkpoints and accepted as
/// a standalone config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Number of convolution layers.
    pub layers: usize,
    /// Transform width per layer; a single entry applies to every layer.
    pub widths: Vec<usize>,
    /// Negative slope of the leaky ReLU.
    pub alpha: f64,
    /// Hidden widths of the fully connected head.
    pub head: Vec<usize>,
    pub tasks: Vec<String>,
    /// Per-task loss weights; empty means 1.0 for every task.
    pub weights: Vec<f64>,
    pub pooling: Pooling,
    /// Width of the optional per-molecule explicit feature vector; 0 for none.
    pub explicit_width: usize,
    /// Seed of the parameter initialization.
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            layers: 2,
            widths: vec![32],
            alpha: 0.01,
            head: vec![256, 256],
            tasks: Vec::new(),
            weights: Vec::new(),
            pooling: Pooling::MaxSumAvg,
            explicit_width: 0,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.layers == 0 {
            return bad("layers must be at least 1".into());
        }
        if self.widths.len() != 1 && self.widths.len() != self.layers {
            return bad(format!("widths has {} entries for {} layers", self.widths.len(), self.layers));
        }
        if self.widths.iter().chain(&self.head).any(|&w| w == 0) {
            return bad("widths must be at least 1".into());
        }
        if !(self.alpha.is_finite() && self.alpha >= 0.0) {
            return bad(format!("alpha {} is not a non-negative number", self.alpha));
        }
        if self.tasks.is_empty() {
            return bad("at least one task is required".into());
        }
        let mut names = self.tasks.clone();
        names.sort();
        names.dedup();
        if names.len() != self.tasks.len() {
            return bad("task names must be unique".into());
        }
        if !self.weights.is_empty() && self.weights.len() != self.tasks.len() {
            return bad(format!("{} weights for {} tasks", self.weights.len(), self.tasks.len()));
        }
        if self.weights.iter().any(|&w| !(w.is_finite() && w > 0.0)) {
            return bad("task weights must be positive".into());
        }
        Ok(())
    }

    /// Transform width of each layer.
    pub fn layer_widths(&self) -> Vec<usize> {
        (0..self.layers).map(|k| if self.widths.len() == 1 { self.widths[0] } else { self.widths[k] }).collect()
    }

    /// Atom embedding widths before the first layer and after each layer.
    pub fn atom_widths(&self) -> Vec<usize> {
        let mut w = vec![ATOM_WIDTH];
        for d in self.layer_widths() {
            w.push(w.last().unwrap() + 3 * d);
        }
        w
    }

    pub fn embedding_width(&self) -> usize {
        self.pooling.kinds().len() * self.atom_widths().last().unwrap()
    }

    pub fn task_weights(&self) -> Vec<f64> {
        if self.weights.is_empty() {
            vec![1.0; self.tasks.len()]
        } else {
            self.weights.clone()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn config() -> ModelConfig {
        ModelConfig { tasks: vec!["y".into()], ..Default::default() }
    }

    #[test]
    fn width_growth_example() {
        let c = ModelConfig { layers: 1, widths: vec![16], ..config() };
        assert_eq!(c.atom_widths(), vec![33, 81]);
        assert_eq!(c.embedding_width(), 243);
    }

    #[test]
    fn defaults_validate_once_tasks_are_set() {
        assert!(ModelConfig::default().validate().is_err());
        config().validate().unwrap();
        assert_eq!(config().task_weights(), vec![1.0]);
    }

    #[test]
    fn rejects_inconsistent_configs() {
        for c in [
            ModelConfig { layers: 0, ..config() },
            ModelConfig { widths: vec![4, 4, 4], ..config() },
            ModelConfig { head: vec![0], ..config() },
            ModelConfig { weights: vec![1.0, 2.0], ..config() },
            ModelConfig { weights: vec![-1.0], ..config() },
            ModelConfig { tasks: vec!["a".into(), "a".into()], ..config() },
        ] {
            assert!(c.validate().is_err(), "{c:?}");
        }
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let v = serde_json::json!({"layers": 1, "depth": 3});
        assert!(serde_json::from_value::<ModelConfig>(v).is_err());
        let v = serde_json::json!({"pooling": "sum", "tasks": ["a"]});
        let c: ModelConfig = serde_json::from_value(v).unwrap();
        assert_eq!(c.pooling, Pooling::Sum);
        assert_eq!(c.layers, 2);
    }
}
