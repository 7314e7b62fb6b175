use super::{Objective, TrainingExample};
use crate::context::{contextualize_on_tape, ChunkPlan};
use crate::error::{Error, Result};
use crate::generator::{BoundGeneratorLayer, GeneratorParams};
use crate::model::{tokens, BaseModel, BoundModel, Delta};
use crate::numerics::{Real, Tape, Var};

/// Settings shared by every example loss of a run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LossOptions {
    pub objective: Objective,
    pub chunk_size: usize,
    pub truncate_unroll: bool,
}

/// One example's objectives recorded on a tape.
#[derive(Debug, Clone)]
pub struct ExampleLoss {
    /// Unweighted sum of the selected objectives.
    pub total: Var,
    /// Mean NLL and scored-token count of the reconstruction target.
    pub reconstruction: Option<(Var, usize)>,
    pub completion: Option<(Var, usize)>,
    /// Final state per generator layer, for diagnostics.
    pub states: Vec<Option<Var>>,
}

/// Contextualizes the example's prefix once and scores the selected
/// targets under the resulting adapter: the prefix itself after a
/// begin-of-reconstruction token, and the continuation after BOS.
pub fn example_loss<T: Real>(
    tape: &mut Tape<T>,
    model: &BoundModel,
    params: &GeneratorParams<T>,
    generator: &[BoundGeneratorLayer],
    example: &TrainingExample,
    options: &LossOptions,
) -> Result<ExampleLoss> {
    let context = example.context();
    let plan = ChunkPlan::new(context.len(), options.chunk_size)?;
    let ctx = contextualize_on_tape(tape, model, params, generator, context, &plan, options.truncate_unroll)?;
    let reconstruction = if options.objective.reconstruction() {
        Some(score(tape, model, &ctx.deltas, tokens::BOR, context)?)
    } else {
        None
    };
    let completion = if options.objective.completion() {
        Some(score(tape, model, &ctx.deltas, tokens::BOS, example.continuation())?)
    } else {
        None
    };
    let total = match (reconstruction, completion) {
        (Some((r, _)), Some((c, _))) => tape.add(r, c)?,
        (Some((r, _)), None) => r,
        (None, Some((c, _))) => c,
        (None, None) => unreachable!("every objective scores at least one target"),
    };
    Ok(ExampleLoss {
        total,
        reconstruction,
        completion,
        states: ctx.states,
    })
}

/// Mean NLL of `target` given `[prefix, target[..len-1]]` under `deltas`.
pub(crate) fn score<T: Real>(
    tape: &mut Tape<T>,
    model: &BoundModel,
    deltas: &[Vec<Delta<T>>],
    prefix: usize,
    target: &[usize],
) -> Result<(Var, usize)> {
    if target.is_empty() {
        return Err(Error::DegenerateTarget);
    }
    let mut input = Vec::with_capacity(target.len());
    input.push(prefix);
    input.extend_from_slice(&target[..target.len() - 1]);
    let (_, logits) = model.run(tape, &input, deltas)?;
    let mask = vec![true; target.len()];
    Ok((tape.cross_entropy(logits, target, &mask)?, target.len()))
}

fn single_objective<T: Real>(
    model: &BaseModel<T>,
    params: &GeneratorParams<T>,
    example: &TrainingExample,
    chunk_size: usize,
    objective: Objective,
) -> Result<f64> {
    params.check_model(model)?;
    let mut tape = Tape::no_grad();
    let bound = model.bind(&mut tape, false);
    let generator = params.bind(&mut tape, false);
    let options = LossOptions {
        objective,
        chunk_size,
        truncate_unroll: false,
    };
    let loss = example_loss(&mut tape, &bound, params, &generator, example, &options)?;
    Ok(tape.value(loss.total).get(0, 0).as_f64())
}

/// `−log P(x₁…x_m | base + G(x₁…x_m)) / m`.
pub fn reconstruction_loss<T: Real>(
    model: &BaseModel<T>,
    params: &GeneratorParams<T>,
    example: &TrainingExample,
    chunk_size: usize,
) -> Result<f64> {
    single_objective(model, params, example, chunk_size, Objective::ReconstructionOnly)
}

/// `−log P(x_{m+1}…x_n | base + G(x₁…x_m)) / (n − m)`.
pub fn completion_loss<T: Real>(
    model: &BaseModel<T>,
    params: &GeneratorParams<T>,
    example: &TrainingExample,
    chunk_size: usize,
) -> Result<f64> {
    single_objective(model, params, example, chunk_size, Objective::CompletionOnly)
}
