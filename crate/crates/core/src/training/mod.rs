//! Self-supervised generator training with the reconstruction and
//! completion objectives, plain pretraining of the toy base model, and
//! held-out evaluation.

mod config;
mod corpus;
mod loss;
mod optim;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::generator::GeneratorParams;
use crate::model::{tokens, BaseModel};
use crate::numerics::{Matrix, Real, Tape};

pub use config::{learning_rate_at, Objective, TrainConfig};
pub use corpus::{
    make_examples, random_pairs, render_pairs, synthetic_corpus, RecallPair, TrainingExample, KEY_ALPHABET,
    KEY_LEN, VALUE_ALPHABET, VALUE_LEN,
};
pub use loss::{completion_loss, example_loss, reconstruction_loss, ExampleLoss, LossOptions};
pub use optim::{clip_global_norm, AdamW};

/// Held-out perplexities, token-weighted over examples.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Perplexities {
    pub reconstruction: f64,
    pub completion: f64,
}

/// One line of the training metrics log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub learning_rate: f64,
    pub loss: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub reconstruction_loss: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub completion_loss: Option<f64>,
    pub grad_norm: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub validation: Option<Perplexities>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome<T> {
    pub params: GeneratorParams<T>,
    pub records: Vec<StepRecord>,
}

/// Endless shuffled stream of examples, re-split every epoch.
struct ExampleStream<'a> {
    corpus: &'a [usize],
    segment_length: usize,
    seed: u64,
    epoch: u64,
    queue: Vec<TrainingExample>,
}

impl<'a> ExampleStream<'a> {
    fn new(corpus: &'a [usize], segment_length: usize, seed: u64) -> Result<Self> {
        make_examples(corpus, segment_length, seed)?;
        Ok(Self {
            corpus,
            segment_length,
            seed,
            epoch: 0,
            queue: Vec::new(),
        })
    }

    /// Returns the next example and whether a new epoch began.
    fn next(&mut self) -> Result<(TrainingExample, bool)> {
        let mut fresh = false;
        if self.queue.is_empty() {
            let seed = self.seed ^ self.epoch.wrapping_mul(0x9e37_79b9_7f4a_7c15);
            let mut batch = make_examples(self.corpus, self.segment_length, seed)?;
            batch.shuffle(&mut ChaCha8Rng::seed_from_u64(seed.wrapping_add(1)));
            batch.reverse();
            self.queue = batch;
            self.epoch += 1;
            fresh = true;
        }
        Ok((self.queue.pop().expect("refilled"), fresh))
    }
}

/// Trains the generator against a frozen base model.
///
/// The base checksum is verified at every epoch boundary and at the end.
/// `heldout` is evaluated every `config.eval_every` steps when non-empty.
pub fn train<T: Real>(
    model: &BaseModel<T>,
    mut params: GeneratorParams<T>,
    corpus: &[usize],
    heldout: &[TrainingExample],
    config: &TrainConfig,
    mut on_step: impl FnMut(&StepRecord),
) -> Result<TrainOutcome<T>> {
    config.validate()?;
    params.check_model(model)?;
    if params.injection().targets() != crate::model::InjectionConfig::new(config.targets.clone())?.targets() {
        return Err(Error::Config("generator injection targets differ from the training config".into()));
    }
    params.set_norm(config.norm);
    let checksum = model.checksum();
    let verify = |m: &BaseModel<T>| -> Result<()> {
        if m.checksum() != checksum {
            return Err(Error::Numeric("base model parameters changed during training".into()));
        }
        Ok(())
    };
    let options = LossOptions {
        objective: config.objective,
        chunk_size: config.chunk_size,
        truncate_unroll: config.truncate_unroll,
    };
    let shapes: Vec<_> = params.tensors().iter().map(|t| t.shape()).collect();
    let mut optimizer = AdamW::<T>::new(&shapes, config.weight_decay);
    let mut stream = ExampleStream::new(corpus, config.segment_length, config.seed)?;
    let mut records = Vec::with_capacity(config.total_steps);

    for step in 0..config.total_steps {
        let lr = learning_rate_at(step, config.learning_rate, config.warmup_steps, config.total_steps);
        let mut grads: Vec<Matrix<T>> = shapes.iter().map(|&(r, c)| Matrix::zeros(r, c)).collect();
        let (mut loss_sum, mut rec_sum, mut comp_sum) = (0.0, 0.0, 0.0);
        let inv_batch = T::from_f64_lossy(1.0 / config.batch_size as f64);
        for _ in 0..config.batch_size {
            let (example, new_epoch) = stream.next()?;
            if new_epoch {
                verify(model)?;
            }
            let mut tape = Tape::new();
            let bound = model.bind(&mut tape, false);
            let generator = params.bind(&mut tape, true);
            let loss = example_loss(&mut tape, &bound, &params, &generator, &example, &options)?;
            let value = tape.value(loss.total).get(0, 0).as_f64();
            if !value.is_finite() {
                let (layer, max_state_entry) = loss
                    .states
                    .iter()
                    .enumerate()
                    .filter_map(|(i, s)| s.map(|v| (i, tape.value(v).max_abs().as_f64())))
                    .fold((0, 0.0), |best, cur| if cur.1 > best.1 || cur.1.is_nan() { cur } else { best });
                return Err(Error::NonFiniteLoss {
                    step,
                    layer,
                    max_state_entry,
                });
            }
            loss_sum += value;
            rec_sum += loss.reconstruction.map_or(0.0, |(v, _)| tape.value(v).get(0, 0).as_f64());
            comp_sum += loss.completion.map_or(0.0, |(v, _)| tape.value(v).get(0, 0).as_f64());
            let mut g = tape.backward(loss.total)?;
            for (acc, layer) in grads.chunks_mut(4).zip(&generator) {
                for (slot, var) in acc.iter_mut().zip([layer.a1, layer.a2, layer.b1, layer.b2]) {
                    if let Some(gv) = g.take(var) {
                        slot.axpy(inv_batch, &gv)?;
                    }
                }
            }
        }
        let grad_norm = clip_global_norm(&mut grads, config.grad_clip);
        if !grad_norm.is_finite() {
            return Err(Error::Numeric(format!("non-finite gradient norm at step {step}")));
        }
        optimizer.step(&mut params.tensors_mut(), &grads, lr)?;

        let b = config.batch_size as f64;
        let validation = if config.eval_every > 0 && !heldout.is_empty() && (step + 1) % config.eval_every == 0 {
            Some(validate(model, &params, heldout, config.chunk_size)?)
        } else {
            None
        };
        let record = StepRecord {
            step,
            learning_rate: lr,
            loss: loss_sum / b,
            reconstruction_loss: config.objective.reconstruction().then_some(rec_sum / b),
            completion_loss: config.objective.completion().then_some(comp_sum / b),
            grad_norm,
            validation,
        };
        on_step(&record);
        records.push(record);
    }
    verify(model)?;
    Ok(TrainOutcome { params, records })
}

/// Token-weighted held-out perplexities of both objectives.
pub fn validate<T: Real>(
    model: &BaseModel<T>,
    params: &GeneratorParams<T>,
    heldout: &[TrainingExample],
    chunk_size: usize,
) -> Result<Perplexities> {
    if heldout.is_empty() {
        return Err(Error::Data("held-out set is empty".into()));
    }
    params.check_model(model)?;
    let options = LossOptions {
        objective: Objective::Both,
        chunk_size,
        truncate_unroll: false,
    };
    let (mut rec, mut rec_n, mut comp, mut comp_n) = (0.0, 0usize, 0.0, 0usize);
    for example in heldout {
        let mut tape = Tape::no_grad();
        let bound = model.bind(&mut tape, false);
        let generator = params.bind(&mut tape, false);
        let loss = example_loss(&mut tape, &bound, params, &generator, example, &options)?;
        let (r, rn) = loss.reconstruction.expect("both objectives");
        let (c, cn) = loss.completion.expect("both objectives");
        rec += tape.value(r).get(0, 0).as_f64() * rn as f64;
        comp += tape.value(c).get(0, 0).as_f64() * cn as f64;
        rec_n += rn;
        comp_n += cn;
    }
    Ok(Perplexities {
        reconstruction: (rec / rec_n as f64).exp(),
        completion: (comp / comp_n as f64).exp(),
    })
}

/// Perplexities of the same targets with the adapter disabled.
pub fn closed_book_perplexities<T: Real>(
    model: &BaseModel<T>,
    params: &GeneratorParams<T>,
    heldout: &[TrainingExample],
    chunk_size: usize,
) -> Result<Perplexities> {
    let mut off = params.clone();
    off.set_scale(0.0);
    validate(model, &off, heldout, chunk_size)
}

/// Settings of plain language-model pretraining for the base model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaseTrainConfig {
    pub steps: usize,
    pub learning_rate: f64,
    pub warmup_steps: usize,
    pub batch_size: usize,
    pub seq_len: usize,
    pub weight_decay: f64,
    pub grad_clip: f64,
    pub seed: u64,
}

impl Default for BaseTrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            learning_rate: 1e-3,
            warmup_steps: 100,
            batch_size: 8,
            seq_len: 128,
            weight_decay: 0.01,
            grad_clip: 1.0,
            seed: 0,
        }
    }
}

/// Next-token training of an unfrozen base model on random corpus windows.
/// Each window is preceded by BOS or, equally often, the
/// begin-of-reconstruction token. Weights end rounded to storage precision.
pub fn pretrain_base<T: Real>(
    model: &mut BaseModel<T>,
    corpus: &[usize],
    config: &BaseTrainConfig,
    mut on_step: impl FnMut(usize, f64, f64),
) -> Result<Vec<f64>> {
    if model.is_frozen() {
        return Err(Error::Config("cannot pretrain a frozen base model".into()));
    }
    if config.seq_len < 2 || config.seq_len > model.config().max_seq_len || corpus.len() < config.seq_len {
        return Err(Error::Data(format!(
            "window of {} tokens does not fit the corpus ({}) or the model ({})",
            config.seq_len,
            corpus.len(),
            model.config().max_seq_len
        )));
    }
    if config.batch_size == 0 || config.warmup_steps > config.steps {
        return Err(Error::Config("invalid base pretraining schedule".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let shapes: Vec<_> = model.tensors().iter().map(|t| t.shape()).collect();
    let mut optimizer = AdamW::<T>::new(&shapes, config.weight_decay);
    let inv_batch = T::from_f64_lossy(1.0 / config.batch_size as f64);
    let mut losses = Vec::with_capacity(config.steps);
    for step in 0..config.steps {
        let lr = learning_rate_at(step, config.learning_rate, config.warmup_steps, config.steps);
        let mut grads: Vec<Matrix<T>> = shapes.iter().map(|&(r, c)| Matrix::zeros(r, c)).collect();
        let mut total = 0.0;
        for _ in 0..config.batch_size {
            let start = rng.random_range(0..=corpus.len() - config.seq_len);
            let target = &corpus[start..start + config.seq_len];
            let prefix = if rng.random_bool(0.5) { tokens::BOS } else { tokens::BOR };
            let mut tape = Tape::new();
            let bound = model.bind(&mut tape, true);
            let (loss, _) = loss::score(&mut tape, &bound, &[], prefix, target)?;
            let value = tape.value(loss).get(0, 0).as_f64();
            if !value.is_finite() {
                return Err(Error::Numeric(format!("non-finite base loss at step {step}")));
            }
            total += value;
            let mut g = tape.backward(loss)?;
            let vars = bound_vars(&bound);
            for (slot, var) in grads.iter_mut().zip(vars) {
                if let Some(gv) = g.take(var) {
                    slot.axpy(inv_batch, &gv)?;
                }
            }
        }
        clip_global_norm(&mut grads, config.grad_clip);
        optimizer.step(&mut model.tensors_mut()?, &grads, lr)?;
        let mean = total / config.batch_size as f64;
        on_step(step, lr, mean);
        losses.push(mean);
    }
    model.round_to_storage();
    Ok(losses)
}

fn bound_vars(b: &crate::model::BoundModel) -> Vec<crate::numerics::Var> {
    let mut out = vec![b.embedding];
    for blk in &b.blocks {
        out.extend([
            blk.attn_norm,
            blk.wq,
            blk.wk,
            blk.wv,
            blk.wo,
            blk.ffn_norm,
            blk.w_up,
            blk.w_down,
        ]);
    }
    out.push(b.final_norm);
    out.push(b.head);
    out
}
