use std::path::Path;

use super::{config_words, tensor_shapes, BaseModel, ModelConfig};
use crate::error::{Error, Result};
use crate::format::{read_file, Reader, Writer};
use crate::numerics::{Matrix, Real};

const MAGIC: &[u8; 4] = b"GAMD";
pub const MODEL_FORMAT_VERSION: u32 = 1;

/// Writes magic, version, the six architecture counts, the frozen flag and
/// every tensor as little-endian `f32` in declared order.
pub fn save_model<T: Real>(model: &BaseModel<T>, path: &Path) -> Result<()> {
    let mut w = Writer::default();
    w.bytes(MAGIC);
    w.u32(MODEL_FORMAT_VERSION);
    for n in config_words(model.config()) {
        w.u32(n);
    }
    w.u32(model.is_frozen() as u32);
    for t in model.tensors() {
        for &v in t.as_slice() {
            w.f32(v.as_f64() as f32);
        }
    }
    w.finish(path)
}

pub fn load_model<T: Real>(path: &Path) -> Result<BaseModel<T>> {
    decode(&read_file(path)?)
}

fn decode<T: Real>(buf: &[u8]) -> Result<BaseModel<T>> {
    let mut r = Reader::new(buf);
    r.magic(MAGIC)?;
    r.version(MODEL_FORMAT_VERSION)?;
    let mut words = [0usize; 6];
    for w in &mut words {
        *w = r.u32()? as usize;
    }
    let config = ModelConfig {
        vocab_size: words[0],
        num_layers: words[1],
        hidden_dim: words[2],
        num_heads: words[3],
        ffn_dim: words[4],
        max_seq_len: words[5],
    };
    config.validate().map_err(|e| Error::Format(format!("bad architecture header: {e}")))?;
    let frozen = match r.u32()? {
        0 => false,
        1 => true,
        other => return Err(Error::Format(format!("bad frozen flag {other}"))),
    };
    let mut tensors = Vec::new();
    for (rows, cols) in tensor_shapes(&config) {
        let raw = r.bytes(rows * cols * 4)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| T::from_f64_lossy(f32::from_le_bytes(c.try_into().unwrap()) as f64))
            .collect();
        tensors.push(Matrix::from_vec(rows, cols, data).map_err(|e| Error::Format(e.to_string()))?);
    }
    r.finish()?;
    let mut model = BaseModel::from_tensors(config, tensors)?;
    if frozen {
        model.freeze();
    }
    Ok(model)
}
