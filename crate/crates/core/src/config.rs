use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Which other tasks a target task may borrow knowledge from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TransferPool {
    /// Other relations present in the same training batch.
    Batch,
    /// Every training relation, each represented by one episode per step.
    AllTrain,
}

/// Every hyperparameter of a run. Unknown keys in a config file are rejected.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Support-set size K.
    pub shots: usize,
    /// Embedding width d.
    pub dim: usize,
    pub margin: f64,
    pub lambda: f64,
    pub tau: f64,
    pub wl_depth: usize,
    pub lr: f64,
    pub inner_lr: f64,
    pub batch_size: usize,
    pub warmup_steps: usize,
    pub max_steps: usize,
    pub eval_every: usize,
    pub seed: u64,
    /// Enables cross-task transfer once warm-up has finished.
    pub transfer: bool,
    /// Enables the task-conditioned inner adaptation step.
    pub meta: bool,
    pub transfer_pool: TransferPool,
    /// Query pairs per training episode.
    pub query_size: usize,
    pub context_cap: usize,
    pub false_contexts: usize,
    pub heads: usize,
    /// Neighbors sampled per edge when building a task's local line graph.
    pub mp_neighbor_cap: usize,
    /// TransE epochs run when no pretrained embeddings are supplied.
    pub pretrain_epochs: usize,
    pub pretrain_lr: f64,
    /// Rank against the raw candidate list instead of the filtered one.
    pub raw_eval: bool,
    pub workers: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            shots: 5,
            dim: 100,
            margin: 1.0,
            lambda: 0.05,
            tau: 0.5,
            wl_depth: 2,
            lr: 0.001,
            inner_lr: 0.1,
            batch_size: 1024,
            warmup_steps: 0,
            max_steps: 30_000,
            eval_every: 1000,
            seed: 0,
            transfer: true,
            meta: true,
            transfer_pool: TransferPool::Batch,
            query_size: 10,
            context_cap: 50,
            false_contexts: 1,
            heads: 4,
            mp_neighbor_cap: 8,
            pretrain_epochs: 100,
            pretrain_lr: 0.005,
            raw_eval: false,
            workers: 1,
        }
    }
}

impl TrainConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: TrainConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config is always serializable")
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        for (name, v) in [
            ("lr", self.lr),
            ("inner_lr", self.inner_lr),
            ("tau", self.tau),
            ("pretrain_lr", self.pretrain_lr),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return bad(format!("{name} must be positive, got {v}"));
            }
        }
        if self.margin < 0.0 || self.lambda < 0.0 {
            return bad("margin and lambda must be non-negative".into());
        }
        if self.warmup_steps > self.max_steps {
            return bad(format!(
                "warmup_steps {} exceeds max_steps {}",
                self.warmup_steps, self.max_steps
            ));
        }
        if self.shots == 0 || self.dim == 0 || self.batch_size == 0 || self.eval_every == 0 {
            return bad("shots, dim, batch_size and eval_every must be at least 1".into());
        }
        if self.heads == 0 || (3 * self.dim) % self.heads != 0 || (2 * self.dim) % self.heads != 0 {
            return bad(format!(
                "heads ({}) must divide both 2*dim and 3*dim (dim = {})",
                self.heads, self.dim
            ));
        }
        if self.false_contexts == 0 || self.query_size == 0 || self.workers == 0 {
            return bad("false_contexts, query_size and workers must be at least 1".into());
        }
        Ok(())
    }
}
