use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::generator::NormKind;
use crate::model::InjectionTarget;
use crate::numerics::Precision;

/// Which self-supervised objectives a run optimizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    Both,
    ReconstructionOnly,
    CompletionOnly,
}

impl Objective {
    pub fn reconstruction(self) -> bool {
        self != Objective::CompletionOnly
    }

    pub fn completion(self) -> bool {
        self != Objective::ReconstructionOnly
    }
}

impl std::fmt::Display for Objective {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Objective::Both => "both",
            Objective::ReconstructionOnly => "reconstruction_only",
            Objective::CompletionOnly => "completion_only",
        })
    }
}

impl std::str::FromStr for Objective {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "both" => Ok(Objective::Both),
            "reconstruction_only" => Ok(Objective::ReconstructionOnly),
            "completion_only" => Ok(Objective::CompletionOnly),
            _ => Err(Error::Config(format!(
                "unknown objective `{s}` (both, reconstruction_only, completion_only)"
            ))),
        }
    }
}

/// Settings of a generator training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub objective: Objective,
    pub norm: NormKind,
    pub targets: Vec<InjectionTarget>,
    pub learning_rate: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub chunk_size: usize,
    pub segment_length: usize,
    pub truncate_unroll: bool,
    /// Global gradient-norm ceiling; 0 disables clipping.
    pub grad_clip: f64,
    /// Held-out evaluation interval in steps; 0 disables it.
    pub eval_every: usize,
    pub seed: u64,
    pub precision: Precision,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            objective: Objective::Both,
            norm: NormKind::Svd,
            targets: vec![InjectionTarget::AttentionOutput],
            learning_rate: 3e-4,
            warmup_steps: 100,
            total_steps: 2000,
            weight_decay: 0.01,
            batch_size: 8,
            chunk_size: 64,
            segment_length: 256,
            truncate_unroll: false,
            grad_clip: 1.0,
            eval_every: 0,
            seed: 0,
            precision: Precision::F64,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::Config(format!("learning_rate must be positive, got {}", self.learning_rate)));
        }
        if self.warmup_steps > self.total_steps {
            return Err(Error::Config(format!(
                "warmup_steps {} exceeds total_steps {}",
                self.warmup_steps, self.total_steps
            )));
        }
        if !(self.weight_decay >= 0.0) || !(self.grad_clip >= 0.0) {
            return Err(Error::Config("weight_decay and grad_clip must be non-negative".into()));
        }
        if self.batch_size == 0 || self.chunk_size == 0 {
            return Err(Error::Config("batch_size and chunk_size must be positive".into()));
        }
        if self.segment_length < 4 {
            return Err(Error::Config("segment_length must be at least 4".into()));
        }
        if self.targets.is_empty() {
            return Err(Error::Config("targets must not be empty".into()));
        }
        Ok(())
    }
}

/// Linear warmup to `peak`, then linear decay to zero at `total`.
pub fn learning_rate_at(step: usize, peak: f64, warmup: usize, total: usize) -> f64 {
    if step < warmup {
        peak * (step + 1) as f64 / warmup as f64
    } else if total > warmup {
        peak * (total - step) as f64 / (total - warmup) as f64
    } else {
        peak
    }
}
