//! Toy decoder-only transformer with adapter injection points.

mod config;
mod count;
mod forward;
mod generate;
mod io;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::numerics::{Matrix, Real, Tape};

pub use config::{tokens, InjectionConfig, InjectionTarget, ModelConfig};
pub use count::{count_parameters, ParameterCounts};
pub(crate) use forward::bind_adapters;
pub use forward::{forward, BoundBlock, BoundModel, Delta, ForwardTrace};
pub use generate::{generate, GenerateOptions, Sampling};
pub use io::{load_model, save_model, MODEL_FORMAT_VERSION};

pub(crate) const RMS_EPS: f64 = 1e-5;
const INIT_STD: f64 = 0.02;

/// Weights of one pre-norm transformer block. Projections are stored
/// `d_out × d_in` and applied as `x·Wᵀ`.
#[derive(Debug, Clone, PartialEq)]
pub struct Block<T> {
    pub attn_norm: Matrix<T>,
    pub wq: Matrix<T>,
    pub wk: Matrix<T>,
    pub wv: Matrix<T>,
    pub wo: Matrix<T>,
    pub ffn_norm: Matrix<T>,
    pub w_up: Matrix<T>,
    pub w_down: Matrix<T>,
}

impl<T: Real> Block<T> {
    pub fn projection(&self, target: InjectionTarget) -> &Matrix<T> {
        match target {
            InjectionTarget::AttentionQuery => &self.wq,
            InjectionTarget::AttentionKey => &self.wk,
            InjectionTarget::AttentionValue => &self.wv,
            InjectionTarget::AttentionOutput => &self.wo,
            InjectionTarget::FfnUp => &self.w_up,
            InjectionTarget::FfnDown => &self.w_down,
        }
    }

    pub fn projection_mut(&mut self, target: InjectionTarget) -> &mut Matrix<T> {
        match target {
            InjectionTarget::AttentionQuery => &mut self.wq,
            InjectionTarget::AttentionKey => &mut self.wk,
            InjectionTarget::AttentionValue => &mut self.wv,
            InjectionTarget::AttentionOutput => &mut self.wo,
            InjectionTarget::FfnUp => &mut self.w_up,
            InjectionTarget::FfnDown => &mut self.w_down,
        }
    }

    fn tensors(&self) -> [&Matrix<T>; 8] {
        [
            &self.attn_norm,
            &self.wq,
            &self.wk,
            &self.wv,
            &self.wo,
            &self.ffn_norm,
            &self.w_up,
            &self.w_down,
        ]
    }

    fn tensors_mut(&mut self) -> [&mut Matrix<T>; 8] {
        [
            &mut self.attn_norm,
            &mut self.wq,
            &mut self.wk,
            &mut self.wv,
            &mut self.wo,
            &mut self.ffn_norm,
            &mut self.w_up,
            &mut self.w_down,
        ]
    }
}

/// The base language model. `frozen` marks it as read-only for training.
#[derive(Debug, Clone, PartialEq)]
pub struct BaseModel<T> {
    config: ModelConfig,
    pub embedding: Matrix<T>,
    pub blocks: Vec<Block<T>>,
    pub final_norm: Matrix<T>,
    pub head: Matrix<T>,
    frozen: bool,
}

impl<T: Real> BaseModel<T> {
    /// Random initialization; weights are rounded to single precision so the
    /// stored file format reproduces them exactly.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (d, f, v) = (config.hidden_dim, config.ffn_dim, config.vocab_size);
        let residual_std = INIT_STD / (2.0 * config.num_layers as f64).sqrt();
        let ones = |n| Matrix::from_fn(1, n, |_, _| T::one());
        let embedding = Matrix::random_normal(v, d, INIT_STD, &mut rng);
        let blocks = (0..config.num_layers)
            .map(|_| Block {
                attn_norm: ones(d),
                wq: Matrix::random_normal(d, d, INIT_STD, &mut rng),
                wk: Matrix::random_normal(d, d, INIT_STD, &mut rng),
                wv: Matrix::random_normal(d, d, INIT_STD, &mut rng),
                wo: Matrix::random_normal(d, d, residual_std, &mut rng),
                ffn_norm: ones(d),
                w_up: Matrix::random_normal(f, d, INIT_STD, &mut rng),
                w_down: Matrix::random_normal(d, f, residual_std, &mut rng),
            })
            .collect();
        let head = Matrix::random_normal(v, d, INIT_STD, &mut rng);
        let mut model = Self {
            config,
            embedding,
            blocks,
            final_norm: ones(d),
            head,
            frozen: false,
        };
        model.round_to_storage();
        Ok(model)
    }

    /// Assembles a model from tensors in declared order, checking shapes.
    pub fn from_tensors(config: ModelConfig, tensors: Vec<Matrix<T>>) -> Result<Self> {
        config.validate()?;
        let shapes = tensor_shapes(&config);
        if tensors.len() != shapes.len() {
            return Err(Error::Format(format!(
                "expected {} tensors, found {}",
                shapes.len(),
                tensors.len()
            )));
        }
        for (t, &s) in tensors.iter().zip(&shapes) {
            if t.shape() != s {
                return Err(Error::dim("BaseModel::from_tensors", s, t.shape()));
            }
        }
        let mut it = tensors.into_iter();
        let mut next = || it.next().unwrap();
        let embedding = next();
        let blocks = (0..config.num_layers)
            .map(|_| Block {
                attn_norm: next(),
                wq: next(),
                wk: next(),
                wv: next(),
                wo: next(),
                ffn_norm: next(),
                w_up: next(),
                w_down: next(),
            })
            .collect();
        let final_norm = next();
        let head = next();
        Ok(Self {
            config,
            embedding,
            blocks,
            final_norm,
            head,
            frozen: false,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    /// All tensors in declared order: embedding, per-block
    /// (attn_norm, wq, wk, wv, wo, ffn_norm, w_up, w_down), final_norm, head.
    pub fn tensors(&self) -> Vec<&Matrix<T>> {
        let mut out = vec![&self.embedding];
        for b in &self.blocks {
            out.extend(b.tensors());
        }
        out.push(&self.final_norm);
        out.push(&self.head);
        out
    }

    /// Mutable tensors in declared order; refuses a frozen model.
    pub fn tensors_mut(&mut self) -> Result<Vec<&mut Matrix<T>>> {
        if self.frozen {
            return Err(Error::Config("base model is frozen".into()));
        }
        let mut out = vec![&mut self.embedding];
        for b in &mut self.blocks {
            out.extend(b.tensors_mut());
        }
        out.push(&mut self.final_norm);
        out.push(&mut self.head);
        Ok(out)
    }

    pub fn num_parameters(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    /// Rounds every weight to the nearest single-precision value; a frozen
    /// model is left untouched.
    pub fn round_to_storage(&mut self) {
        let Ok(tensors) = self.tensors_mut() else { return };
        for t in tensors {
            for v in t.as_mut_slice() {
                *v = T::from_f64_lossy(v.as_f64() as f32 as f64);
            }
        }
    }

    /// SHA-256 over the architecture and every parameter bit, hex encoded.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for n in config_words(&self.config) {
            h.update(n.to_le_bytes());
        }
        for t in self.tensors() {
            for v in t.as_slice() {
                h.update(v.as_f64().to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    /// Same weights in another precision.
    pub fn cast<U: Real>(&self) -> BaseModel<U> {
        let tensors = self.tensors().into_iter().map(|t| t.cast()).collect();
        let mut m = BaseModel::from_tensors(self.config, tensors).expect("shapes preserved");
        m.frozen = self.frozen;
        m
    }
}

/// Mean negative log-likelihood of `targets` over the rows of `logits`
/// selected by `mask`.
pub fn lm_loss<T: Real>(logits: &Matrix<T>, targets: &[usize], mask: &[bool]) -> Result<f64> {
    let mut tape = Tape::no_grad();
    let l = tape.constant(logits.clone());
    let loss = tape.cross_entropy(l, targets, mask)?;
    Ok(tape.value(loss).get(0, 0).as_f64())
}

pub(crate) fn config_words(c: &ModelConfig) -> [u32; 6] {
    [
        c.vocab_size as u32,
        c.num_layers as u32,
        c.hidden_dim as u32,
        c.num_heads as u32,
        c.ffn_dim as u32,
        c.max_seq_len as u32,
    ]
}

pub(crate) fn tensor_shapes(c: &ModelConfig) -> Vec<(usize, usize)> {
    let (d, f, v) = (c.hidden_dim, c.ffn_dim, c.vocab_size);
    let mut out = vec![(v, d)];
    for _ in 0..c.num_layers {
        out.extend([(1, d), (d, d), (d, d), (d, d), (d, d), (1, d), (f, d), (d, f)]);
    }
    out.push((1, d));
    out.push((v, d));
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ModelConfig {
        ModelConfig {
            vocab_size: 20,
            num_layers: 2,
            hidden_dim: 8,
            num_heads: 2,
            ffn_dim: 16,
            max_seq_len: 32,
        }
    }

    #[test]
    fn init_is_deterministic_and_single_precision() {
        let a = BaseModel::<f64>::new(small(), 3).unwrap();
        let b = BaseModel::<f64>::new(small(), 3).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, BaseModel::<f64>::new(small(), 4).unwrap());
        for t in a.tensors() {
            assert!(t.as_slice().iter().all(|&v| v == v as f32 as f64));
        }
    }

    #[test]
    fn tensor_order_matches_shapes() {
        let m = BaseModel::<f64>::new(small(), 1).unwrap();
        let shapes: Vec<_> = m.tensors().iter().map(|t| t.shape()).collect();
        assert_eq!(shapes, tensor_shapes(&small()));
        let rebuilt = BaseModel::from_tensors(small(), m.tensors().into_iter().cloned().collect()).unwrap();
        assert_eq!(rebuilt, m);
    }

    #[test]
    fn frozen_model_refuses_mutation() {
        let mut m = BaseModel::<f64>::new(small(), 1).unwrap();
        let before = m.checksum();
        m.freeze();
        assert!(m.tensors_mut().is_err());
        m.round_to_storage();
        assert_eq!(before, m.checksum());
        assert!(m.is_frozen());
    }

    #[test]
    fn checksum_sees_single_bit_changes() {
        let m = BaseModel::<f64>::new(small(), 1).unwrap();
        let mut n = m.clone();
        let v = n.head.get(0, 0);
        n.head.set(0, 0, f64::from_bits(v.to_bits() ^ 1));
        assert_ne!(m.checksum(), n.checksum());
    }

    #[test]
    fn invalid_config_is_rejected() {
        let mut c = small();
        c.num_heads = 3;
        assert!(matches!(BaseModel::<f64>::new(c, 0), Err(Error::Config(_))));
    }
}
