use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Byte-level token ids: 0..=255 are raw bytes, followed by the specials.
pub mod tokens {
    pub const BOS: usize = 256;
    pub const EOS: usize = 257;
    pub const PAD: usize = 258;
    /// Begin-of-reconstruction: prefixes text the model should reproduce.
    pub const BOR: usize = 259;
    pub const VOCAB_SIZE: usize = 260;

    pub fn encode(bytes: &[u8]) -> Vec<usize> {
        bytes.iter().map(|&b| b as usize).collect()
    }

    /// Byte tokens only; specials are dropped.
    pub fn decode(ids: &[usize]) -> Vec<u8> {
        ids.iter().filter(|&&t| t < 256).map(|&t| t as u8).collect()
    }
}

/// Architecture of the toy decoder-only transformer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub num_layers: usize,
    pub hidden_dim: usize,
    pub num_heads: usize,
    pub ffn_dim: usize,
    pub max_seq_len: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            vocab_size: tokens::VOCAB_SIZE,
            num_layers: 4,
            hidden_dim: 64,
            num_heads: 4,
            ffn_dim: 256,
            max_seq_len: 512,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("vocab_size", self.vocab_size),
            ("num_layers", self.num_layers),
            ("hidden_dim", self.hidden_dim),
            ("num_heads", self.num_heads),
            ("ffn_dim", self.ffn_dim),
            ("max_seq_len", self.max_seq_len),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if !self.hidden_dim.is_multiple_of(self.num_heads) {
            return Err(Error::Config(format!(
                "hidden_dim {} is not divisible by num_heads {}",
                self.hidden_dim, self.num_heads
            )));
        }
        if !(self.hidden_dim / self.num_heads).is_multiple_of(2) {
            return Err(Error::Config("rotary embedding needs an even head dimension".into()));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.hidden_dim / self.num_heads
    }
}

/// A linear projection inside a block that can receive a generated adapter.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InjectionTarget {
    AttentionQuery,
    AttentionKey,
    AttentionValue,
    AttentionOutput,
    FfnUp,
    FfnDown,
}

impl InjectionTarget {
    pub const ALL: [InjectionTarget; 6] = [
        InjectionTarget::AttentionQuery,
        InjectionTarget::AttentionKey,
        InjectionTarget::AttentionValue,
        InjectionTarget::AttentionOutput,
        InjectionTarget::FfnUp,
        InjectionTarget::FfnDown,
    ];

    /// `(d_in, d_out)` of the projection for a model with the given widths.
    pub fn dims(self, hidden_dim: usize, ffn_dim: usize) -> (usize, usize) {
        match self {
            InjectionTarget::FfnUp => (hidden_dim, ffn_dim),
            InjectionTarget::FfnDown => (ffn_dim, hidden_dim),
            _ => (hidden_dim, hidden_dim),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            InjectionTarget::AttentionQuery => "attention-query",
            InjectionTarget::AttentionKey => "attention-key",
            InjectionTarget::AttentionValue => "attention-value",
            InjectionTarget::AttentionOutput => "attention-output",
            InjectionTarget::FfnUp => "ffn-up",
            InjectionTarget::FfnDown => "ffn-down",
        }
    }

    pub(crate) fn code(self) -> u8 {
        Self::ALL.iter().position(|&t| t == self).unwrap() as u8
    }

    pub(crate) fn from_code(code: u8) -> Result<Self> {
        Self::ALL
            .get(code as usize)
            .copied()
            .ok_or_else(|| Error::Format(format!("unknown injection target code {code}")))
    }
}

impl fmt::Display for InjectionTarget {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for InjectionTarget {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .iter()
            .copied()
            .find(|t| t.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown injection target `{s}`")))
    }
}

/// The set of projections that receive adapters, in every block.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InjectionConfig {
    targets: Vec<InjectionTarget>,
}

impl Default for InjectionConfig {
    fn default() -> Self {
        Self {
            targets: vec![InjectionTarget::AttentionOutput],
        }
    }
}

impl InjectionConfig {
    /// Sorted, de-duplicated, non-empty target set.
    pub fn new(mut targets: Vec<InjectionTarget>) -> Result<Self> {
        targets.sort();
        targets.dedup();
        if targets.is_empty() {
            return Err(Error::Config("injection target set is empty".into()));
        }
        Ok(Self { targets })
    }

    pub fn targets(&self) -> &[InjectionTarget] {
        &self.targets
    }

    pub fn contains(&self, t: InjectionTarget) -> bool {
        self.targets.contains(&t)
    }
}
