//! Chunked contextualization: the sequential streaming pipeline, the
//! layer-by-layer parallel-prefix pipeline, its differentiable counterpart
//! and the adapter/state archives.

mod archive;
mod tape;

use crate::error::{Error, Result};
use crate::generator::{emit_adapter, emit_entry, init_state, update_state, AdapterFactors, GeneratorParams, StreamState};
use crate::model::{bind_adapters, BaseModel};
use crate::numerics::{projected_gram, Matrix, Real, Tape};

pub use archive::{
    load_adapter, load_state, save_adapter, save_state, AdapterArchive, ADAPTER_FORMAT_VERSION, STATE_FORMAT_VERSION,
};
pub use tape::{contextualize_on_tape, TapeContext};

/// Partition of a token stream into consecutive chunks.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChunkPlan {
    chunk_size: usize,
    boundaries: Vec<(usize, usize)>,
}

impl ChunkPlan {
    /// Fixed-size chunks; only the last one may be shorter.
    pub fn new(len: usize, chunk_size: usize) -> Result<Self> {
        if chunk_size == 0 {
            return Err(Error::Plan("chunk size must be positive".into()));
        }
        let boundaries = (0..len)
            .step_by(chunk_size)
            .map(|s| (s, (s + chunk_size).min(len)))
            .collect();
        Ok(Self { chunk_size, boundaries })
    }

    /// Explicit boundaries, which must tile `0..len` with non-empty chunks
    /// of at most `chunk_size` tokens.
    pub fn from_boundaries(len: usize, chunk_size: usize, boundaries: Vec<(usize, usize)>) -> Result<Self> {
        let mut expected = 0;
        for &(s, e) in &boundaries {
            if s != expected || e <= s || e - s > chunk_size {
                return Err(Error::Plan(format!(
                    "chunk ({s}, {e}) breaks the partition at {expected} (chunk size {chunk_size})"
                )));
            }
            expected = e;
        }
        if expected != len {
            return Err(Error::Plan(format!("chunks cover {expected} of {len} tokens")));
        }
        Ok(Self { chunk_size, boundaries })
    }

    pub fn chunk_size(&self) -> usize {
        self.chunk_size
    }

    pub fn boundaries(&self) -> &[(usize, usize)] {
        &self.boundaries
    }

    pub fn num_chunks(&self) -> usize {
        self.boundaries.len()
    }

    /// Number of tokens covered.
    pub fn len(&self) -> usize {
        self.boundaries.last().map_or(0, |b| b.1)
    }

    pub fn is_empty(&self) -> bool {
        self.boundaries.is_empty()
    }

    pub(crate) fn check(&self, tokens: usize) -> Result<()> {
        if self.len() != tokens {
            return Err(Error::Plan(format!("plan covers {} tokens, context has {tokens}", self.len())));
        }
        Ok(())
    }
}

/// Behavior switches of the sequential pipeline.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ContextOptions {
    /// Let each chunk attend to the preceding tokens of the stream (up to
    /// the model's maximum length) instead of only to itself.
    pub cross_chunk_attention: bool,
}

/// Streams `tokens` through the generator from a fresh state and returns the
/// final state and adapter.
pub fn contextualize<T: Real>(
    model: &BaseModel<T>,
    params: &GeneratorParams<T>,
    tokens: &[usize],
    plan: &ChunkPlan,
) -> Result<(StreamState, AdapterFactors<T>)> {
    contextualize_from(model, params, init_state(params), tokens, plan, ContextOptions::default())
}

/// Continues streaming from `state`: each chunk is encoded under the adapter
/// of everything consumed before it, then folded into the state.
pub fn contextualize_from<T: Real>(
    model: &BaseModel<T>,
    params: &GeneratorParams<T>,
    mut state: StreamState,
    tokens: &[usize],
    plan: &ChunkPlan,
    options: ContextOptions,
) -> Result<(StreamState, AdapterFactors<T>)> {
    params.check_model(model)?;
    plan.check(tokens.len())?;
    let mut adapter = emit_adapter(&state, params)?;
    for &(start, end) in plan.boundaries() {
        let window = if options.cross_chunk_attention {
            end.saturating_sub(model.config().max_seq_len).min(start)
        } else {
            start
        };
        let hidden = encode_block_inputs(model, &adapter, &tokens[window..end], start - window)?;
        update_state(&mut state, params, &hidden)?;
        adapter = emit_adapter(&state, params)?;
    }
    Ok((state, adapter))
}

/// Inputs `H⁽⁰⁾…H⁽ᴸ⁻¹⁾` of every block for `tokens[skip..]`, computed over
/// the whole of `tokens`. The last block is not evaluated.
fn encode_block_inputs<T: Real>(
    model: &BaseModel<T>,
    adapter: &AdapterFactors<T>,
    tokens: &[usize],
    skip: usize,
) -> Result<Vec<Matrix<T>>> {
    let mut tape = Tape::no_grad();
    let bound = model.bind(&mut tape, false);
    let deltas = bind_adapters(&mut tape, model, adapter)?;
    let layers = model.config().num_layers;
    let mut x = bound.embed(&mut tape, tokens)?;
    let mut out = Vec::with_capacity(layers);
    for l in 0..layers {
        out.push(tape.value(x).slice_rows(skip..tokens.len()));
        if l + 1 < layers {
            x = bound.block(&mut tape, l, x, &deltas[l])?;
        }
    }
    Ok(out)
}

/// Adapters of every prefix of the chunk stream, computed layer by layer:
/// block `l` inputs for all chunks give the cumulative states and emitted
/// updates of block `l` for every prefix, which in turn produce the block
/// `l + 1` inputs. Chunks attend only to themselves.
pub fn parallel_prefix_contextualize<T: Real>(
    model: &BaseModel<T>,
    params: &GeneratorParams<T>,
    tokens: &[usize],
    plan: &ChunkPlan,
) -> Result<Vec<AdapterFactors<T>>> {
    params.check_model(model)?;
    plan.check(tokens.len())?;
    let chunks = plan.num_chunks();
    let layers = model.config().num_layers;
    let scale = params.config().scale;

    let mut hidden: Vec<Matrix<T>> = Vec::with_capacity(chunks);
    {
        let mut tape = Tape::no_grad();
        let bound = model.bind(&mut tape, false);
        for &(s, e) in plan.boundaries() {
            let h = bound.embed(&mut tape, &tokens[s..e])?;
            hidden.push(tape.value(h).clone());
        }
    }
    let mut prefix_entries: Vec<Vec<_>> = vec![Vec::new(); chunks];
    for l in 0..layers {
        let gen_layers: Vec<_> = params.layers().iter().filter(|g| g.block == l).collect();
        for g in &gen_layers {
            let dr = g.a2.rows();
            let (a2, b1) = (g.a2.cast::<f64>(), g.b1.cast::<f64>());
            let mut cumulative = Matrix::<f64>::zeros(dr, dr);
            for (t, h) in hidden.iter().enumerate() {
                cumulative.axpy(1.0, &projected_gram(&h.cast::<f64>(), &a2, &b1)?)?;
                prefix_entries[t].push(emit_entry(g, &cumulative, params.config())?);
            }
        }
        if l + 1 == layers {
            break;
        }
        // Chunk t passes block l under the prefix adapter of chunks before it.
        let mut next = Vec::with_capacity(chunks);
        for (t, h) in hidden.iter().enumerate() {
            let mut tape = Tape::no_grad();
            let bound = model.bind(&mut tape, false);
            let x = tape.constant(h.clone());
            let deltas = if t == 0 {
                vec![Vec::new(); layers]
            } else {
                let previous = AdapterFactors::new(scale, prefix_entries[t - 1].clone());
                bind_adapters(&mut tape, model, &previous)?
            };
            let y = bound.block(&mut tape, l, x, &deltas[l])?;
            next.push(tape.value(y).clone());
        }
        hidden = next;
    }
    Ok(prefix_entries
        .into_iter()
        .map(|entries| AdapterFactors::new(scale, entries))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn plans_partition_the_stream() {
        let p = ChunkPlan::new(10, 4).unwrap();
        assert_eq!(p.boundaries(), &[(0, 4), (4, 8), (8, 10)]);
        assert_eq!(p.len(), 10);
        assert!(ChunkPlan::new(0, 4).unwrap().is_empty());
        assert!(ChunkPlan::new(5, 0).is_err());
        assert!(ChunkPlan::from_boundaries(6, 4, vec![(0, 2), (2, 6)]).is_ok());
        assert!(ChunkPlan::from_boundaries(6, 3, vec![(0, 2), (2, 6)]).is_err());
        assert!(ChunkPlan::from_boundaries(6, 4, vec![(0, 2), (3, 6)]).is_err());
        assert!(ChunkPlan::from_boundaries(7, 4, vec![(0, 2), (2, 6)]).is_err());
        assert!(ChunkPlan::new(9, 4).unwrap().check(8).is_err());
    }
}
