use std::path::Path;

use crate::error::{Error, Result};
use crate::format::{read_file, Reader, Writer};
use crate::generator::{AdapterEntry, AdapterFactors, StreamState};
use crate::model::InjectionTarget;
use crate::numerics::{Matrix, Real};

const ADAPTER_MAGIC: &[u8; 4] = b"GADP";
const STATE_MAGIC: &[u8; 4] = b"GAST";
pub const ADAPTER_FORMAT_VERSION: u32 = 1;
pub const STATE_FORMAT_VERSION: u32 = 1;

/// A stored adapter with the architecture fingerprint and provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct AdapterArchive<T> {
    pub fingerprint: [u8; 32],
    pub adapter: AdapterFactors<T>,
    pub tokens_consumed: u64,
    pub chunks_consumed: u64,
}

/// Writes magic, version, fingerprint, entry count and rank, `α` as `f64`,
/// provenance counts, per-entry `(block, target, d_out, d_in)`, then every
/// `P` and `Q` as little-endian `f32`.
pub fn save_adapter<T: Real>(archive: &AdapterArchive<T>, path: &Path) -> Result<()> {
    let entries = archive.adapter.entries();
    let rank = entries.first().map_or(0, |e| e.p.cols());
    let mut w = Writer::default();
    w.bytes(ADAPTER_MAGIC);
    w.u32(ADAPTER_FORMAT_VERSION);
    w.bytes(&archive.fingerprint);
    w.u32(entries.len() as u32);
    w.u32(rank as u32);
    w.f64(archive.adapter.scale());
    w.u64(archive.tokens_consumed);
    w.u64(archive.chunks_consumed);
    for e in entries {
        if e.p.cols() != rank || e.q.rows() != rank {
            return Err(Error::dim("save_adapter", (e.p.rows(), rank), (e.p.cols(), e.q.rows())));
        }
        w.u32(e.block as u32);
        w.u32(e.target.code() as u32);
        w.u32(e.p.rows() as u32);
        w.u32(e.q.cols() as u32);
    }
    for e in entries {
        for m in [&e.p, &e.q] {
            for &v in m.as_slice() {
                w.f32(v.as_f64() as f32);
            }
        }
    }
    w.finish(path)
}

/// Loads an adapter archive, refusing one built for another architecture.
pub fn load_adapter<T: Real>(path: &Path, expected: &[u8; 32]) -> Result<AdapterArchive<T>> {
    let buf = read_file(path)?;
    let mut r = Reader::new(&buf);
    r.magic(ADAPTER_MAGIC)?;
    r.version(ADAPTER_FORMAT_VERSION)?;
    let fingerprint = read_fingerprint(&mut r, expected)?;
    let count = r.u32()? as usize;
    let rank = r.u32()? as usize;
    let scale = r.f64()?;
    let tokens_consumed = r.u64()?;
    let chunks_consumed = r.u64()?;
    let mut headers = Vec::new();
    for _ in 0..count {
        let block = r.u32()? as usize;
        let target = InjectionTarget::from_code(r.u32()? as u8)?;
        let d_out = r.u32()? as usize;
        let d_in = r.u32()? as usize;
        headers.push((block, target, d_out, d_in));
    }
    let mut entries = Vec::with_capacity(count);
    for (block, target, d_out, d_in) in headers {
        let p = read_f32_matrix(&mut r, d_out, rank)?;
        let q = read_f32_matrix(&mut r, rank, d_in)?;
        entries.push(AdapterEntry { block, target, p, q });
    }
    r.finish()?;
    Ok(AdapterArchive {
        fingerprint,
        adapter: AdapterFactors::new(scale, entries),
        tokens_consumed,
        chunks_consumed,
    })
}

/// Writes magic, version, fingerprint, layer count, state side, token and
/// chunk counts, then every state as little-endian `f64`.
pub fn save_state(state: &StreamState, fingerprint: &[u8; 32], path: &Path) -> Result<()> {
    let side = state.states().first().map_or(0, |s| s.rows());
    let mut w = Writer::default();
    w.bytes(STATE_MAGIC);
    w.u32(STATE_FORMAT_VERSION);
    w.bytes(fingerprint);
    w.u32(state.states().len() as u32);
    w.u32(side as u32);
    w.u64(state.tokens_consumed());
    w.u64(state.chunks_consumed());
    for s in state.states() {
        for &v in s.as_slice() {
            w.f64(v);
        }
    }
    w.finish(path)
}

pub fn load_state(path: &Path, expected: &[u8; 32]) -> Result<StreamState> {
    let buf = read_file(path)?;
    let mut r = Reader::new(&buf);
    r.magic(STATE_MAGIC)?;
    r.version(STATE_FORMAT_VERSION)?;
    read_fingerprint(&mut r, expected)?;
    let layers = r.u32()? as usize;
    let side = r.u32()? as usize;
    let tokens_consumed = r.u64()?;
    let chunks_consumed = r.u64()?;
    let mut states = Vec::with_capacity(layers);
    for _ in 0..layers {
        let raw = r.bytes(side * side * 8)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        states.push(Matrix::from_vec(side, side, data).map_err(|e| Error::Format(e.to_string()))?);
    }
    r.finish()?;
    Ok(StreamState {
        states,
        tokens_consumed,
        chunks_consumed,
    })
}

fn read_fingerprint(r: &mut Reader<'_>, expected: &[u8; 32]) -> Result<[u8; 32]> {
    let found: [u8; 32] = r.bytes(32)?.try_into().unwrap();
    if &found != expected {
        return Err(Error::Compatibility {
            expected: hex::encode(expected),
            found: hex::encode(found),
        });
    }
    Ok(found)
}

fn read_f32_matrix<T: Real>(r: &mut Reader<'_>, rows: usize, cols: usize) -> Result<Matrix<T>> {
    let raw = r.bytes(rows * cols * 4)?;
    let data = raw
        .chunks_exact(4)
        .map(|c| T::from_f64_lossy(f32::from_le_bytes(c.try_into().unwrap()) as f64))
        .collect();
    Matrix::from_vec(rows, cols, data).map_err(|e| Error::Format(e.to_string()))
}
