//! Post-hoc ensembling of trained checkpoints.
//!
//! Several model configurations are trained, the epochs with the best
//! validation error are pooled, and a small network is trained over each
//! selected member's molecule embedding and score. Members stay frozen. The
//! ensemble reduces per-member encodings with max, sum and average, so its
//! width does not depend on the member count and its output does not depend
//! on member order.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::trainer::EpochRecord;

mod ensemble;

pub use ensemble::{ensemble_predict, train_finetune, EnsembleConfig, EnsembleLayout, EnsembleModel, FinetuneOutcome};

/// Epochs kept per configuration when building the default pool.
pub const DEFAULT_TOP_K: usize = 5;

/// One trained checkpoint and its validation error.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Candidate {
    pub checkpoint: PathBuf,
    pub config_id: String,
    pub epoch: usize,
    pub val_rmse: f64,
}

impl Candidate {
    /// Canonical member order: by configuration, epoch, then path.
    fn key(&self) -> (&str, usize, &Path) {
        (&self.config_id, self.epoch, &self.checkpoint)
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct CandidatePool {
    pub candidates: Vec<Candidate>,
}

impl CandidatePool {
    pub fn new(candidates: Vec<Candidate>) -> Result<Self> {
        let pool = CandidatePool { candidates };
        pool.validate()?;
        Ok(pool)
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(c) = self.candidates.iter().find(|c| !c.val_rmse.is_finite()) {
            return Err(Error::Config(format!(
                "candidate {} epoch {} has non-finite validation RMSE",
                c.config_id, c.epoch
            )));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.candidates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.candidates.is_empty()
    }

    /// Reads a JSON manifest: an array of candidate entries.
    pub fn read_manifest(path: &Path) -> Result<Self> {
        let text = std::io::read_to_string(crate::error::open_file(path)?)?;
        let pool: CandidatePool = serde_json::from_str(&text)?;
        pool.validate()?;
        Ok(pool)
    }

    /// Candidates from one training run's epoch records, scored on `task`.
    /// Epochs without a checkpoint or without validation labels are skipped.
    pub fn from_records(config_id: &str, records: &[EpochRecord], task: &str) -> Self {
        let candidates = records
            .iter()
            .filter_map(|r| {
                let rmse = r.validation.get(task)?.rmse;
                Some(Candidate {
                    checkpoint: PathBuf::from(r.checkpoint.as_ref()?),
                    config_id: config_id.to_string(),
                    epoch: r.epoch,
                    val_rmse: rmse,
                })
            })
            .collect();
        CandidatePool { candidates }
    }

    /// Candidates in canonical member order.
    pub fn canonical(&self) -> Vec<Candidate> {
        let mut c = self.candidates.clone();
        c.sort_by(|a, b| a.key().cmp(&b.key()));
        c
    }
}

/// The `k` entries with lowest validation RMSE, ties broken by config id then
/// epoch, one entry per (config id, epoch). A `k` beyond the pool size returns
/// the whole pool with a warning.
pub fn select_models(pool: &CandidatePool, k: usize) -> Result<CandidatePool> {
    if pool.is_empty() {
        return Err(Error::EmptyInput("candidate pool is empty".into()));
    }
    if k == 0 {
        return Err(Error::Config("k must be at least 1".into()));
    }
    pool.validate()?;
    let mut ranked = pool.candidates.clone();
    ranked.sort_by(|a, b| a.val_rmse.total_cmp(&b.val_rmse).then_with(|| a.key().cmp(&b.key())));
    let mut seen = BTreeSet::new();
    ranked.retain(|c| seen.insert((c.config_id.clone(), c.epoch)));
    if k > ranked.len() {
        log::warn!("requested {k} models but the pool holds {}; using all of them", ranked.len());
    }
    ranked.truncate(k);
    Ok(CandidatePool { candidates: ranked })
}

/// Three trunk shapes that differ in depth and convolution width, derived
/// from `base`.
pub fn default_candidate_configs(base: &ModelConfig) -> Vec<(String, ModelConfig)> {
    [(1, 64), (2, 32), (3, 16)]
        .into_iter()
        .map(|(layers, width)| {
            (format!("k{layers}-d{width}"), ModelConfig { layers, widths: vec![width], ..base.clone() })
        })
        .collect()
}
