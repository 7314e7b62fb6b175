use std::path::Path;

use super::{GeneratorConfig, GeneratorParams, NormKind};
use crate::error::{Error, Result};
use crate::format::{read_file, Reader, Writer};
use crate::model::{InjectionConfig, InjectionTarget, ModelConfig};
use crate::numerics::{Matrix, Real, SvdConfig};

const MAGIC: &[u8; 4] = b"GAGN";
pub const GENERATOR_FORMAT_VERSION: u32 = 1;

/// Writes the generator with its full configuration; tensors are stored as
/// little-endian `f64` so training can resume without loss.
pub fn save_generator<T: Real>(params: &GeneratorParams<T>, path: &Path) -> Result<()> {
    let mut w = Writer::default();
    w.bytes(MAGIC);
    w.u32(GENERATOR_FORMAT_VERSION);
    for n in crate::model::config_words(&params.model) {
        w.u32(n);
    }
    let targets = params.injection.targets();
    w.u32(targets.len() as u32);
    for t in targets {
        w.u32(t.code() as u32);
    }
    let c = &params.config;
    w.u32(c.intermediate_dim as u32);
    w.u32(c.rank as u32);
    w.f64(c.scale);
    w.u32(c.norm.code());
    w.u32(c.svd.power_iterations as u32);
    w.u64(c.svd.seed);
    for t in params.tensors() {
        for &v in t.as_slice() {
            w.f64(v.as_f64());
        }
    }
    w.finish(path)
}

pub fn load_generator<T: Real>(path: &Path) -> Result<GeneratorParams<T>> {
    decode(&read_file(path)?)
}

fn decode<T: Real>(buf: &[u8]) -> Result<GeneratorParams<T>> {
    let mut r = Reader::new(buf);
    r.magic(MAGIC)?;
    r.version(GENERATOR_FORMAT_VERSION)?;
    let mut words = [0usize; 6];
    for w in &mut words {
        *w = r.u32()? as usize;
    }
    let model = ModelConfig {
        vocab_size: words[0],
        num_layers: words[1],
        hidden_dim: words[2],
        num_heads: words[3],
        ffn_dim: words[4],
        max_seq_len: words[5],
    };
    let n_targets = r.u32()? as usize;
    if n_targets > InjectionTarget::ALL.len() {
        return Err(Error::Format(format!("{n_targets} injection targets")));
    }
    let targets = (0..n_targets)
        .map(|_| InjectionTarget::from_code(r.u32()? as u8))
        .collect::<Result<Vec<_>>>()?;
    let injection = InjectionConfig::new(targets).map_err(|e| Error::Format(e.to_string()))?;
    let config = GeneratorConfig {
        intermediate_dim: r.u32()? as usize,
        rank: r.u32()? as usize,
        scale: r.f64()?,
        norm: NormKind::from_code(r.u32()?)?,
        svd: SvdConfig {
            power_iterations: r.u32()? as usize,
            seed: r.u64()?,
        },
    };
    super::validate(&model, &injection, &config).map_err(|e| Error::Format(format!("bad generator header: {e}")))?;
    let mut tensors = Vec::new();
    for _block in 0..model.num_layers {
        for &target in injection.targets() {
            for (rows, cols) in super::layer_shapes(&model, &config, target) {
                let raw = r.bytes(rows * cols * 8)?;
                let data = raw
                    .chunks_exact(8)
                    .map(|c| T::from_f64_lossy(f64::from_le_bytes(c.try_into().unwrap())))
                    .collect();
                tensors.push(Matrix::from_vec(rows, cols, data).map_err(|e| Error::Format(e.to_string()))?);
            }
        }
    }
    r.finish()?;
    GeneratorParams::from_tensors(model, injection, config, tensors)
}
