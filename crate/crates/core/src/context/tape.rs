use super::ChunkPlan;
use crate::error::Result;
use crate::generator::{BoundGeneratorLayer, GeneratorParams, NormKind};
use crate::model::{BoundModel, Delta};
use crate::numerics::{Real, Tape, Var};

/// Result of a differentiable contextualization.
#[derive(Debug, Clone)]
pub struct TapeContext<T> {
    /// Final adapter as injectable updates, grouped by block.
    pub deltas: Vec<Vec<Delta<T>>>,
    /// Final state per generator layer (`None` for an empty context).
    pub states: Vec<Option<Var>>,
}

/// The sequential pipeline recorded on `tape`, so gradients reach the
/// generator through every chunk.
///
/// With `truncate` set, chunks are encoded under detached adapters: each
/// chunk still contributes its projected Gram to the final state, but no
/// gradient flows through earlier adapters into later hidden states.
pub fn contextualize_on_tape<T: Real>(
    tape: &mut Tape<T>,
    model: &BoundModel,
    params: &GeneratorParams<T>,
    generator: &[BoundGeneratorLayer],
    tokens: &[usize],
    plan: &ChunkPlan,
    truncate: bool,
) -> Result<TapeContext<T>> {
    plan.check(tokens.len())?;
    let layers = model.config().num_layers;
    let mut states: Vec<Option<Var>> = vec![None; generator.len()];
    let mut deltas = vec![Vec::new(); layers];
    for &(start, end) in plan.boundaries() {
        let mut x = model.embed(tape, &tokens[start..end])?;
        let mut inputs = Vec::with_capacity(layers);
        for l in 0..layers {
            inputs.push(x);
            if l + 1 < layers {
                x = model.block(tape, l, x, &deltas[l])?;
            }
        }
        for ((layer, g), s) in params.layers().iter().zip(generator).zip(states.iter_mut()) {
            let gram = tape.projected_gram(inputs[layer.block], g.a2, g.b1)?;
            *s = Some(match *s {
                Some(prev) => tape.add(prev, gram)?,
                None => gram,
            });
        }
        let detach = truncate && end < tokens.len();
        deltas = build_deltas(tape, params, generator, &states, detach)?;
    }
    Ok(TapeContext { deltas, states })
}

/// `α·A1·norm(S)·B2` per generator layer as a three-factor update.
fn build_deltas<T: Real>(
    tape: &mut Tape<T>,
    params: &GeneratorParams<T>,
    generator: &[BoundGeneratorLayer],
    states: &[Option<Var>],
    detach: bool,
) -> Result<Vec<Vec<Delta<T>>>> {
    let cfg = params.config();
    let scale = T::from_f64_lossy(cfg.scale);
    let mut out = vec![Vec::new(); params.model_config().num_layers];
    for ((layer, g), s) in params.layers().iter().zip(generator).zip(states) {
        let Some(s) = *s else { continue };
        if tape.value(s).is_zero() || scale == T::zero() {
            continue;
        }
        let norm = match cfg.norm {
            NormKind::Svd => tape.svd_normalize(s, cfg.rank, &cfg.svd)?,
            NormKind::Frobenius => {
                let f = tape.frobenius_normalize(s);
                tape.svd_truncate(f, cfg.rank, &cfg.svd)?
            }
            NormKind::None => tape.svd_truncate(s, cfg.rank, &cfg.svd)?,
        };
        let factors = if detach {
            let a1 = tape.detach(g.a1);
            let n = tape.detach(norm);
            let b2 = tape.detach(g.b2);
            vec![a1, n, b2]
        } else {
            vec![g.a1, norm, g.b2]
        };
        out[layer.block].push(Delta {
            target: layer.target,
            factors,
            scale,
        });
    }
    Ok(out)
}
