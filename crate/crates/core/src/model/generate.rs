use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{forward, tokens, BaseModel};
use crate::error::{Error, Result};
use crate::generator::AdapterFactors;
use crate::numerics::Real;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Sampling {
    Greedy,
    Temperature { temperature: f64, seed: u64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct GenerateOptions {
    pub max_tokens: usize,
    pub sampling: Sampling,
    /// Decoding stops after emitting any of these (EOS is always included).
    pub stop: Vec<usize>,
}

impl Default for GenerateOptions {
    fn default() -> Self {
        Self {
            max_tokens: 64,
            sampling: Sampling::Greedy,
            stop: Vec::new(),
        }
    }
}

/// Autoregressive decoding over a sliding window of the last
/// `max_seq_len` tokens. Returns only the new tokens.
pub fn generate<T: Real>(
    model: &BaseModel<T>,
    adapters: Option<&AdapterFactors<T>>,
    prompt: &[usize],
    options: &GenerateOptions,
) -> Result<Vec<usize>> {
    if prompt.is_empty() {
        return Err(Error::Data("generation needs a non-empty prompt".into()));
    }
    let mut rng = match options.sampling {
        Sampling::Temperature { temperature, seed } => {
            if !(temperature > 0.0) {
                return Err(Error::Config(format!("temperature must be positive, got {temperature}")));
            }
            Some(ChaCha8Rng::seed_from_u64(seed))
        }
        Sampling::Greedy => None,
    };
    let window = model.config().max_seq_len;
    let mut seq = prompt.to_vec();
    let mut out = Vec::new();
    for _ in 0..options.max_tokens {
        let start = seq.len().saturating_sub(window);
        let trace = forward(model, &seq[start..], adapters, false)?;
        let last = trace.logits.row(trace.logits.rows() - 1);
        let next = match (&options.sampling, rng.as_mut()) {
            (Sampling::Temperature { temperature, .. }, Some(rng)) => sample(last, *temperature, rng),
            _ => argmax(last),
        };
        seq.push(next);
        out.push(next);
        if next == tokens::EOS || options.stop.contains(&next) {
            break;
        }
    }
    Ok(out)
}

fn argmax<T: Real>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

fn sample<T: Real>(row: &[T], temperature: f64, rng: &mut ChaCha8Rng) -> usize {
    let mx = row.iter().map(|v| v.as_f64()).fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = row.iter().map(|v| ((v.as_f64() - mx) / temperature).exp()).collect();
    let total: f64 = weights.iter().sum();
    let mut u = rng.random::<f64>() * total;
    for (i, w) in weights.iter().enumerate() {
        if u < *w {
            return i;
        }
        u -= w;
    }
    weights.len() - 1
}
