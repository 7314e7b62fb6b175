use super::{BaseModel, InjectionTarget, ModelConfig, RMS_EPS};
use crate::error::{Error, Result};
use crate::generator::AdapterFactors;
use crate::numerics::{Matrix, Real, Tape, Var};

/// A low-rank update `scale · F₀·F₁⋯F_k` injected into one projection.
///
/// The factors are tape nodes so the update may depend on trainable
/// parameters.
#[derive(Debug, Clone)]
pub struct Delta<T> {
    pub target: InjectionTarget,
    pub factors: Vec<Var>,
    pub scale: T,
}

/// Block weights bound as tape nodes.
#[derive(Debug, Clone, Copy)]
pub struct BoundBlock {
    pub attn_norm: Var,
    pub wq: Var,
    pub wk: Var,
    pub wv: Var,
    pub wo: Var,
    pub ffn_norm: Var,
    pub w_up: Var,
    pub w_down: Var,
}

impl BoundBlock {
    fn projection(&self, target: InjectionTarget) -> Var {
        match target {
            InjectionTarget::AttentionQuery => self.wq,
            InjectionTarget::AttentionKey => self.wk,
            InjectionTarget::AttentionValue => self.wv,
            InjectionTarget::AttentionOutput => self.wo,
            InjectionTarget::FfnUp => self.w_up,
            InjectionTarget::FfnDown => self.w_down,
        }
    }
}

/// A model whose weights live on a tape, so the same binding can be reused
/// across several passes of one computation.
#[derive(Debug, Clone)]
pub struct BoundModel {
    config: ModelConfig,
    pub embedding: Var,
    pub blocks: Vec<BoundBlock>,
    pub final_norm: Var,
    pub head: Var,
}

impl<T: Real> BaseModel<T> {
    /// Places the weights on `tape`, as parameters when `trainable`.
    pub fn bind(&self, tape: &mut Tape<T>, trainable: bool) -> BoundModel {
        let mut put = |m: &Matrix<T>| {
            if trainable {
                tape.param(m.clone())
            } else {
                tape.constant(m.clone())
            }
        };
        let embedding = put(&self.embedding);
        let blocks = self
            .blocks
            .iter()
            .map(|b| BoundBlock {
                attn_norm: put(&b.attn_norm),
                wq: put(&b.wq),
                wk: put(&b.wk),
                wv: put(&b.wv),
                wo: put(&b.wo),
                ffn_norm: put(&b.ffn_norm),
                w_up: put(&b.w_up),
                w_down: put(&b.w_down),
            })
            .collect();
        let final_norm = put(&self.final_norm);
        let head = put(&self.head);
        BoundModel {
            config: self.config,
            embedding,
            blocks,
            final_norm,
            head,
        }
    }
}

impl BoundModel {
    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    /// Embedding-layer output for `tokens`.
    pub fn embed<T: Real>(&self, tape: &mut Tape<T>, tokens: &[usize]) -> Result<Var> {
        if tokens.len() > self.config.max_seq_len {
            return Err(Error::Length {
                len: tokens.len(),
                max: self.config.max_seq_len,
            });
        }
        tape.embedding(self.embedding, tokens)
    }

    /// One pre-norm block; positions restart at 0 for the rows of `x`.
    pub fn block<T: Real>(&self, tape: &mut Tape<T>, index: usize, x: Var, deltas: &[Delta<T>]) -> Result<Var> {
        let b = &self.blocks[index];
        let heads = self.config.num_heads;
        let proj = |tape: &mut Tape<T>, input: Var, target: InjectionTarget| {
            project(tape, input, b.projection(target), deltas.iter().filter(|d| d.target == target))
        };
        let a = tape.rms_norm(x, b.attn_norm, RMS_EPS)?;
        let q = proj(tape, a, InjectionTarget::AttentionQuery)?;
        let k = proj(tape, a, InjectionTarget::AttentionKey)?;
        let v = proj(tape, a, InjectionTarget::AttentionValue)?;
        let q = tape.rope(q, heads, 0)?;
        let k = tape.rope(k, heads, 0)?;
        let o = tape.causal_attention(q, k, v, heads)?;
        let o = proj(tape, o, InjectionTarget::AttentionOutput)?;
        let x = tape.add(x, o)?;
        let f = tape.rms_norm(x, b.ffn_norm, RMS_EPS)?;
        let u = proj(tape, f, InjectionTarget::FfnUp)?;
        let u = tape.gelu(u);
        let down = proj(tape, u, InjectionTarget::FfnDown)?;
        tape.add(x, down)
    }

    /// Final norm and output head.
    pub fn head<T: Real>(&self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        let n = tape.rms_norm(x, self.final_norm, RMS_EPS)?;
        tape.linear(n, self.head)
    }

    /// Full pass. `deltas[l]` holds the updates for block `l` (an empty
    /// slice means none). Returns the hidden states `H⁽⁰⁾…H⁽ᴸ⁾` and logits.
    pub fn run<T: Real>(
        &self,
        tape: &mut Tape<T>,
        tokens: &[usize],
        deltas: &[Vec<Delta<T>>],
    ) -> Result<(Vec<Var>, Var)> {
        let mut x = self.embed(tape, tokens)?;
        let mut hidden = Vec::with_capacity(self.blocks.len() + 1);
        hidden.push(x);
        for l in 0..self.blocks.len() {
            let d = deltas.get(l).map(Vec::as_slice).unwrap_or(&[]);
            x = self.block(tape, l, x, d)?;
            hidden.push(x);
        }
        let logits = self.head(tape, x)?;
        Ok((hidden, logits))
    }
}

fn project<'a, T: Real>(
    tape: &mut Tape<T>,
    x: Var,
    w: Var,
    deltas: impl Iterator<Item = &'a Delta<T>>,
) -> Result<Var> {
    let mut y = tape.linear(x, w)?;
    for d in deltas {
        let mut t = x;
        for &f in d.factors.iter().rev() {
            t = tape.linear(t, f)?;
        }
        let t = tape.scale(t, d.scale);
        y = tape.add(y, t)?;
    }
    Ok(y)
}

/// Hidden states (when requested) and logits of one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardTrace<T> {
    /// `H⁽⁰⁾…H⁽ᴸ⁾`, empty unless a trace was requested.
    pub hidden: Vec<Matrix<T>>,
    pub logits: Matrix<T>,
}

/// Inference forward pass with optional adapters injected as
/// `y = W·x + α·P·(Q·x)`. Zero adapter factors and `α = 0` are skipped, so
/// the result is then bitwise identical to the plain model.
pub fn forward<T: Real>(
    model: &BaseModel<T>,
    tokens: &[usize],
    adapters: Option<&AdapterFactors<T>>,
    want_trace: bool,
) -> Result<ForwardTrace<T>> {
    let mut tape = Tape::no_grad();
    let bound = model.bind(&mut tape, false);
    let deltas = match adapters {
        Some(a) => bind_adapters(&mut tape, model, a)?,
        None => Vec::new(),
    };
    let (hidden, logits) = bound.run(&mut tape, tokens, &deltas)?;
    Ok(ForwardTrace {
        hidden: if want_trace {
            hidden.iter().map(|&h| tape.value(h).clone()).collect()
        } else {
            Vec::new()
        },
        logits: tape.value(logits).clone(),
    })
}

/// Binds adapter factors as constants, grouped by block, after checking
/// them against the model's projection shapes.
pub(crate) fn bind_adapters<T: Real>(
    tape: &mut Tape<T>,
    model: &BaseModel<T>,
    adapters: &AdapterFactors<T>,
) -> Result<Vec<Vec<Delta<T>>>> {
    let mut out: Vec<Vec<Delta<T>>> = vec![Vec::new(); model.blocks.len()];
    let scale = T::from_f64_lossy(adapters.scale());
    for e in adapters.entries() {
        let block = model
            .blocks
            .get(e.block)
            .ok_or_else(|| Error::Config(format!("adapter for block {} but the model has {}", e.block, model.blocks.len())))?;
        let (d_out, d_in) = block.projection(e.target).shape();
        if e.p.rows() != d_out || e.q.cols() != d_in || e.p.cols() != e.q.rows() {
            return Err(Error::dim("adapter injection", (d_out, d_in), (e.p.rows(), e.q.cols())));
        }
        if scale == T::zero() || e.p.is_zero() || e.q.is_zero() {
            continue;
        }
        let p = tape.constant(e.p.clone());
        let q = tape.constant(e.q.clone());
        out[e.block].push(Delta {
            target: e.target,
            factors: vec![p, q],
            scale,
        });
    }
    Ok(out)
}
