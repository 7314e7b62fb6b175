//! Flat TOML run configuration shared by every subcommand.

use std::path::{Path, PathBuf};

use genadapter::generator::{GeneratorConfig, NormKind};
use genadapter::model::{tokens, InjectionConfig, InjectionTarget, ModelConfig};
use genadapter::numerics::{Precision, SvdConfig};
use genadapter::training::{BaseTrainConfig, Objective, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};

/// One path or a list of paths.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Paths {
    One(PathBuf),
    Many(Vec<PathBuf>),
}

impl Paths {
    pub fn to_vec(&self) -> Vec<PathBuf> {
        match self {
            Paths::One(p) => vec![p.clone()],
            Paths::Many(v) => v.clone(),
        }
    }
}

/// Every architecture, generator and training knob, one key each.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Training text files.
    pub corpus: Option<Paths>,
    /// Held-out text files; when absent the tail of the corpus is held out.
    pub heldout: Option<Paths>,
    pub heldout_fraction: f64,
    /// Cap on the number of held-out segments evaluated.
    pub heldout_segments: usize,

    pub vocab_size: usize,
    pub num_layers: usize,
    pub hidden_dim: usize,
    pub num_heads: usize,
    pub ffn_dim: usize,
    pub max_seq_len: usize,

    pub intermediate_dim: usize,
    pub rank: usize,
    pub scale: f64,
    pub power_iterations: usize,
    pub svd_seed: u64,

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
    pub grad_clip: f64,
    pub eval_every: usize,
    pub seed: u64,
    pub precision: Precision,

    pub base_steps: usize,
    pub base_learning_rate: f64,
    pub base_warmup_steps: usize,
    pub base_batch_size: usize,
    pub base_seq_len: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        let model = ModelConfig::default();
        let generator = GeneratorConfig::default();
        let train = TrainConfig::default();
        let base = BaseTrainConfig::default();
        Self {
            corpus: None,
            heldout: None,
            heldout_fraction: 0.05,
            heldout_segments: 64,
            vocab_size: model.vocab_size,
            num_layers: model.num_layers,
            hidden_dim: model.hidden_dim,
            num_heads: model.num_heads,
            ffn_dim: model.ffn_dim,
            max_seq_len: model.max_seq_len,
            intermediate_dim: generator.intermediate_dim,
            rank: generator.rank,
            scale: generator.scale,
            power_iterations: generator.svd.power_iterations,
            svd_seed: generator.svd.seed,
            objective: train.objective,
            norm: train.norm,
            targets: train.targets,
            learning_rate: train.learning_rate,
            warmup_steps: train.warmup_steps,
            total_steps: train.total_steps,
            weight_decay: train.weight_decay,
            batch_size: train.batch_size,
            chunk_size: train.chunk_size,
            segment_length: train.segment_length,
            truncate_unroll: train.truncate_unroll,
            grad_clip: train.grad_clip,
            eval_every: train.eval_every,
            seed: train.seed,
            precision: train.precision,
            base_steps: base.steps,
            base_learning_rate: base.learning_rate,
            base_warmup_steps: base.warmup_steps,
            base_batch_size: base.batch_size,
            base_seq_len: base.seq_len,
        }
    }
}

impl RunConfig {
    /// Parses a config file; unknown keys and type errors are config errors.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text).map_err(|e| match e {
            CliError::Config(msg) => CliError::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn parse(text: &str) -> Result<Self> {
        let config: Self = toml::from_str(text).map_err(|e| CliError::Config(e.message().to_string()))?;
        config.check()?;
        Ok(config)
    }

    /// Cross-field validation, reporting the offending key.
    pub fn check(&self) -> Result<()> {
        if self.vocab_size != tokens::VOCAB_SIZE {
            return Err(key_error(
                "vocab_size",
                format!("the byte-level vocabulary has {} entries", tokens::VOCAB_SIZE),
            ));
        }
        self.model()
            .validate()
            .map_err(|e| CliError::Config(format!("architecture keys: {e}")))?;
        if !(0.0..1.0).contains(&self.heldout_fraction) {
            return Err(key_error("heldout_fraction", "must lie in [0, 1)"));
        }
        if self.base_seq_len > self.max_seq_len || self.base_seq_len < 2 {
            return Err(key_error("base_seq_len", "must lie in [2, max_seq_len]"));
        }
        if self.base_warmup_steps > self.base_steps {
            return Err(key_error("base_warmup_steps", "exceeds base_steps"));
        }
        if self.segment_length > self.max_seq_len {
            return Err(key_error("segment_length", "must not exceed max_seq_len"));
        }
        InjectionConfig::new(self.targets.clone()).map_err(|_| key_error("targets", "must not be empty"))?;
        self.train()
            .validate()
            .map_err(|e| CliError::Config(format!("training keys: {e}")))?;
        Ok(())
    }

    pub fn model(&self) -> ModelConfig {
        ModelConfig {
            vocab_size: self.vocab_size,
            num_layers: self.num_layers,
            hidden_dim: self.hidden_dim,
            num_heads: self.num_heads,
            ffn_dim: self.ffn_dim,
            max_seq_len: self.max_seq_len,
        }
    }

    pub fn injection(&self) -> Result<InjectionConfig> {
        InjectionConfig::new(self.targets.clone()).map_err(|_| key_error("targets", "must not be empty"))
    }

    pub fn generator(&self) -> GeneratorConfig {
        GeneratorConfig {
            intermediate_dim: self.intermediate_dim,
            rank: self.rank,
            scale: self.scale,
            norm: self.norm,
            svd: SvdConfig {
                power_iterations: self.power_iterations,
                seed: self.svd_seed,
            },
        }
    }

    pub fn train(&self) -> TrainConfig {
        TrainConfig {
            objective: self.objective,
            norm: self.norm,
            targets: self.targets.clone(),
            learning_rate: self.learning_rate,
            warmup_steps: self.warmup_steps,
            total_steps: self.total_steps,
            weight_decay: self.weight_decay,
            batch_size: self.batch_size,
            chunk_size: self.chunk_size,
            segment_length: self.segment_length,
            truncate_unroll: self.truncate_unroll,
            grad_clip: self.grad_clip,
            eval_every: self.eval_every,
            seed: self.seed,
            precision: self.precision,
        }
    }

    pub fn base(&self) -> BaseTrainConfig {
        BaseTrainConfig {
            steps: self.base_steps,
            learning_rate: self.base_learning_rate,
            warmup_steps: self.base_warmup_steps,
            batch_size: self.base_batch_size,
            seq_len: self.base_seq_len,
            weight_decay: self.weight_decay,
            grad_clip: self.grad_clip,
            seed: self.seed,
        }
    }

    /// The corpus files, which must be configured and exist.
    pub fn corpus_paths(&self) -> Result<Vec<PathBuf>> {
        let paths = self
            .corpus
            .as_ref()
            .map(Paths::to_vec)
            .unwrap_or_default();
        if paths.is_empty() {
            return Err(key_error("corpus", "is required by this command"));
        }
        check_exist("corpus", &paths)?;
        Ok(paths)
    }

    pub fn heldout_paths(&self) -> Result<Option<Vec<PathBuf>>> {
        match &self.heldout {
            None => Ok(None),
            Some(p) => {
                let paths = p.to_vec();
                check_exist("heldout", &paths)?;
                Ok(Some(paths))
            }
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

fn check_exist(key: &str, paths: &[PathBuf]) -> Result<()> {
    for p in paths {
        if !p.is_file() {
            return Err(key_error(key, format!("file {} does not exist", p.display())));
        }
    }
    Ok(())
}

fn key_error(key: &str, msg: impl std::fmt::Display) -> CliError {
    CliError::Config(format!("key `{key}` {msg}"))
}
