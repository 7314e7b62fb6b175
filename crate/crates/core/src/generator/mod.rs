//! Bilinear adapter generators: streaming Gram state, normalization and
//! emission of low-rank adapter factors.

mod io;

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::{config_words, BaseModel, InjectionConfig, InjectionTarget, ModelConfig};
use crate::numerics::linalg::{low_rank_svd, svd_normalize};
use crate::numerics::{frobenius_normalize, projected_gram, Matrix, Real, SvdConfig, Tape, Var};

pub use io::{load_generator, save_generator, GENERATOR_FORMAT_VERSION};

/// How the accumulated state is normalized before emission.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NormKind {
    /// `U·Vᵀ` of the rank-`r` SVD.
    Svd,
    /// `S/‖S‖_F`, then rank-`r` truncation.
    Frobenius,
    /// Rank-`r` truncation only.
    None,
}

impl NormKind {
    fn code(self) -> u32 {
        match self {
            NormKind::Svd => 0,
            NormKind::Frobenius => 1,
            NormKind::None => 2,
        }
    }

    fn from_code(c: u32) -> Result<Self> {
        match c {
            0 => Ok(NormKind::Svd),
            1 => Ok(NormKind::Frobenius),
            2 => Ok(NormKind::None),
            _ => Err(Error::Format(format!("unknown normalization code {c}"))),
        }
    }
}

impl fmt::Display for NormKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            NormKind::Svd => "svd",
            NormKind::Frobenius => "frobenius",
            NormKind::None => "none",
        })
    }
}

impl FromStr for NormKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "svd" => Ok(NormKind::Svd),
            "frobenius" => Ok(NormKind::Frobenius),
            "none" => Ok(NormKind::None),
            _ => Err(Error::Config(format!("unknown normalization `{s}` (svd, frobenius, none)"))),
        }
    }
}

/// Shape and behavior of a generator, independent of its weights.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    /// Side `d_r` of the square state.
    pub intermediate_dim: usize,
    /// Emission rank `r`.
    pub rank: usize,
    /// Adapter scale `α`, applied at injection.
    pub scale: f64,
    pub norm: NormKind,
    pub svd: SvdConfig,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            intermediate_dim: 32,
            rank: 8,
            scale: 1.0 / 16.0,
            norm: NormKind::Svd,
            svd: SvdConfig::default(),
        }
    }
}

/// Generator weights for one (block, target) pair.
#[derive(Debug, Clone, PartialEq)]
pub struct GeneratorLayer<T> {
    pub block: usize,
    pub target: InjectionTarget,
    /// `d_out × d_r`
    pub a1: Matrix<T>,
    /// `d_r × d_h`
    pub a2: Matrix<T>,
    /// `d_h × d_r`
    pub b1: Matrix<T>,
    /// `d_r × d_in`
    pub b2: Matrix<T>,
}

/// All generator weights, one layer per block and injection target, ordered
/// block-major with targets in sorted order.
#[derive(Debug, Clone, PartialEq)]
pub struct GeneratorParams<T> {
    config: GeneratorConfig,
    model: ModelConfig,
    injection: InjectionConfig,
    layers: Vec<GeneratorLayer<T>>,
}

impl<T: Real> GeneratorParams<T> {
    /// Gaussian initialization with standard deviation `1/√d_r`.
    pub fn new(model: ModelConfig, injection: InjectionConfig, config: GeneratorConfig, seed: u64) -> Result<Self> {
        validate(&model, &injection, &config)?;
        let dr = config.intermediate_dim;
        let std = 1.0 / (dr as f64).sqrt();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut layers = Vec::new();
        for block in 0..model.num_layers {
            for &target in injection.targets() {
                let (d_in, d_out) = target.dims(model.hidden_dim, model.ffn_dim);
                layers.push(GeneratorLayer {
                    block,
                    target,
                    a1: Matrix::random_normal(d_out, dr, std, &mut rng),
                    a2: Matrix::random_normal(dr, model.hidden_dim, std, &mut rng),
                    b1: Matrix::random_normal(model.hidden_dim, dr, std, &mut rng),
                    b2: Matrix::random_normal(dr, d_in, std, &mut rng),
                });
            }
        }
        Ok(Self {
            config,
            model,
            injection,
            layers,
        })
    }

    /// Assembles parameters from tensors in declared order (per layer
    /// `a1, a2, b1, b2`).
    pub fn from_tensors(
        model: ModelConfig,
        injection: InjectionConfig,
        config: GeneratorConfig,
        tensors: Vec<Matrix<T>>,
    ) -> Result<Self> {
        validate(&model, &injection, &config)?;
        let mut shapes = Vec::new();
        for block in 0..model.num_layers {
            for &target in injection.targets() {
                shapes.push((block, target, layer_shapes(&model, &config, target)));
            }
        }
        if tensors.len() != 4 * shapes.len() {
            return Err(Error::Format(format!(
                "expected {} generator tensors, found {}",
                4 * shapes.len(),
                tensors.len()
            )));
        }
        let mut it = tensors.into_iter();
        let mut layers = Vec::new();
        for (block, target, expected) in shapes {
            let mut four: Vec<Matrix<T>> = (0..4).map(|_| it.next().unwrap()).collect();
            for (t, s) in four.iter().zip(expected) {
                if t.shape() != s {
                    return Err(Error::dim("GeneratorParams::from_tensors", s, t.shape()));
                }
            }
            let b2 = four.pop().unwrap();
            let b1 = four.pop().unwrap();
            let a2 = four.pop().unwrap();
            let a1 = four.pop().unwrap();
            layers.push(GeneratorLayer {
                block,
                target,
                a1,
                a2,
                b1,
                b2,
            });
        }
        Ok(Self {
            config,
            model,
            injection,
            layers,
        })
    }

    pub fn config(&self) -> &GeneratorConfig {
        &self.config
    }

    /// Changes behavior settings that do not affect tensor shapes.
    pub fn set_scale(&mut self, scale: f64) {
        self.config.scale = scale;
    }

    pub fn set_norm(&mut self, norm: NormKind) {
        self.config.norm = norm;
    }

    pub fn model_config(&self) -> &ModelConfig {
        &self.model
    }

    pub fn injection(&self) -> &InjectionConfig {
        &self.injection
    }

    pub fn layers(&self) -> &[GeneratorLayer<T>] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [GeneratorLayer<T>] {
        &mut self.layers
    }

    pub fn tensors(&self) -> Vec<&Matrix<T>> {
        self.layers.iter().flat_map(|l| [&l.a1, &l.a2, &l.b1, &l.b2]).collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Matrix<T>> {
        self.layers
            .iter_mut()
            .flat_map(|l| [&mut l.a1, &mut l.a2, &mut l.b1, &mut l.b2])
            .collect()
    }

    pub fn num_parameters(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn cast<U: Real>(&self) -> GeneratorParams<U> {
        GeneratorParams {
            config: self.config,
            model: self.model,
            injection: self.injection.clone(),
            layers: self
                .layers
                .iter()
                .map(|l| GeneratorLayer {
                    block: l.block,
                    target: l.target,
                    a1: l.a1.cast(),
                    a2: l.a2.cast(),
                    b1: l.b1.cast(),
                    b2: l.b2.cast(),
                })
                .collect(),
        }
    }

    /// Identifies the architecture an adapter or state was produced for.
    pub fn fingerprint(&self) -> [u8; 32] {
        fingerprint(&self.model, &self.injection, &self.config)
    }

    /// Checks that these parameters were built for `model`.
    pub fn check_model<U: Real>(&self, model: &BaseModel<U>) -> Result<()> {
        if *model.config() != self.model {
            return Err(Error::Compatibility {
                expected: format!("{:?}", model.config()),
                found: format!("{:?}", self.model),
            });
        }
        Ok(())
    }

    /// Places the weights on `tape`, as parameters when `trainable`.
    pub fn bind(&self, tape: &mut Tape<T>, trainable: bool) -> Vec<BoundGeneratorLayer> {
        let mut put = |m: &Matrix<T>| {
            if trainable {
                tape.param(m.clone())
            } else {
                tape.constant(m.clone())
            }
        };
        self.layers
            .iter()
            .map(|l| BoundGeneratorLayer {
                a1: put(&l.a1),
                a2: put(&l.a2),
                b1: put(&l.b1),
                b2: put(&l.b2),
            })
            .collect()
    }
}

/// Generator weights of one layer bound on a tape.
#[derive(Debug, Clone, Copy)]
pub struct BoundGeneratorLayer {
    pub a1: Var,
    pub a2: Var,
    pub b1: Var,
    pub b2: Var,
}

fn layer_shapes(model: &ModelConfig, config: &GeneratorConfig, target: InjectionTarget) -> [(usize, usize); 4] {
    let (d_in, d_out) = target.dims(model.hidden_dim, model.ffn_dim);
    let (dr, dh) = (config.intermediate_dim, model.hidden_dim);
    [(d_out, dr), (dr, dh), (dh, dr), (dr, d_in)]
}

fn validate(model: &ModelConfig, injection: &InjectionConfig, config: &GeneratorConfig) -> Result<()> {
    model.validate()?;
    let dr = config.intermediate_dim;
    if dr == 0 || config.rank == 0 {
        return Err(Error::Config("intermediate_dim and rank must be positive".into()));
    }
    if config.rank > dr {
        return Err(Error::Config(format!("rank {} exceeds intermediate_dim {dr}", config.rank)));
    }
    for &t in injection.targets() {
        let (d_in, d_out) = t.dims(model.hidden_dim, model.ffn_dim);
        let limit = d_in.min(d_out).min(model.hidden_dim);
        if dr > limit {
            return Err(Error::Config(format!(
                "intermediate_dim {dr} exceeds min(d_in, d_out, d_h) = {limit} for {t}"
            )));
        }
    }
    if !config.scale.is_finite() {
        return Err(Error::Config("adapter scale must be finite".into()));
    }
    Ok(())
}

/// SHA-256 of the model dimensions, injection targets, state width and rank.
pub fn fingerprint(model: &ModelConfig, injection: &InjectionConfig, config: &GeneratorConfig) -> [u8; 32] {
    let mut h = Sha256::new();
    for w in config_words(model) {
        h.update(w.to_le_bytes());
    }
    h.update((config.intermediate_dim as u32).to_le_bytes());
    h.update((config.rank as u32).to_le_bytes());
    for t in injection.targets() {
        h.update([t.code()]);
    }
    h.finalize().into()
}

/// Accumulated projected Gram matrices, one `d_r × d_r` block per generator
/// layer, kept in double precision.
#[derive(Debug, Clone, PartialEq)]
pub struct StreamState {
    pub(crate) states: Vec<Matrix<f64>>,
    pub(crate) tokens_consumed: u64,
    pub(crate) chunks_consumed: u64,
}

impl StreamState {
    pub fn states(&self) -> &[Matrix<f64>] {
        &self.states
    }

    pub fn tokens_consumed(&self) -> u64 {
        self.tokens_consumed
    }

    pub fn chunks_consumed(&self) -> u64 {
        self.chunks_consumed
    }

    /// Largest absolute state entry per layer.
    pub fn max_abs(&self) -> Vec<f64> {
        self.states.iter().map(|s| s.max_abs()).collect()
    }
}

pub fn init_state<T: Real>(params: &GeneratorParams<T>) -> StreamState {
    let dr = params.config.intermediate_dim;
    StreamState {
        states: params.layers.iter().map(|_| Matrix::zeros(dr, dr)).collect(),
        tokens_consumed: 0,
        chunks_consumed: 0,
    }
}

/// Adds one chunk: `S ← S + A2·Hᵀ·H·B1` for every layer, where `hidden[l]`
/// is the input of block `l` for the chunk.
pub fn update_state<T: Real>(state: &mut StreamState, params: &GeneratorParams<T>, hidden: &[Matrix<T>]) -> Result<()> {
    if hidden.len() < params.model.num_layers {
        return Err(Error::Config(format!(
            "need block inputs for {} blocks, got {}",
            params.model.num_layers,
            hidden.len()
        )));
    }
    if state.states.len() != params.layers.len() {
        return Err(Error::Config("stream state does not match the generator".into()));
    }
    let rows = hidden[0].rows();
    let mut grams = Vec::with_capacity(params.layers.len());
    for layer in &params.layers {
        let h = &hidden[layer.block];
        if h.cols() != params.model.hidden_dim || h.rows() != rows {
            return Err(Error::dim("update_state", (rows, params.model.hidden_dim), h.shape()));
        }
        grams.push(projected_gram(&h.cast::<f64>(), &layer.a2.cast(), &layer.b1.cast())?);
    }
    for (s, g) in state.states.iter_mut().zip(grams) {
        s.axpy(1.0, &g)?;
    }
    state.tokens_consumed += rows as u64;
    state.chunks_consumed += 1;
    Ok(())
}

/// One emitted low-rank update `α·P·Q` for a (block, target) pair.
#[derive(Debug, Clone, PartialEq)]
pub struct AdapterEntry<T> {
    pub block: usize,
    pub target: InjectionTarget,
    /// `d_out × r`
    pub p: Matrix<T>,
    /// `r × d_in`
    pub q: Matrix<T>,
}

/// Generated adapter: factor pairs per generator layer plus the scale.
#[derive(Debug, Clone, PartialEq)]
pub struct AdapterFactors<T> {
    scale: f64,
    entries: Vec<AdapterEntry<T>>,
}

impl<T: Real> AdapterFactors<T> {
    pub fn new(scale: f64, entries: Vec<AdapterEntry<T>>) -> Self {
        Self { scale, entries }
    }

    /// All-zero factors shaped for `params`.
    pub fn zeros(params: &GeneratorParams<T>) -> Self {
        let r = params.config.rank;
        let entries = params
            .layers
            .iter()
            .map(|l| AdapterEntry {
                block: l.block,
                target: l.target,
                p: Matrix::zeros(l.a1.rows(), r),
                q: Matrix::zeros(r, l.b2.cols()),
            })
            .collect();
        Self {
            scale: params.config.scale,
            entries,
        }
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    pub fn entries(&self) -> &[AdapterEntry<T>] {
        &self.entries
    }

    pub fn is_zero(&self) -> bool {
        self.entries.iter().all(|e| e.p.is_zero() || e.q.is_zero())
    }

    /// Number of stored factor entries.
    pub fn num_floats(&self) -> usize {
        self.entries.iter().map(|e| e.p.len() + e.q.len()).sum()
    }

    /// Dense `P·Q` per entry (without `α`).
    pub fn dense(&self) -> Result<Vec<Matrix<T>>> {
        self.entries.iter().map(|e| e.p.matmul(&e.q)).collect()
    }

    pub fn negated(&self) -> Self {
        let mut out = self.clone();
        for e in &mut out.entries {
            e.p = e.p.scale(-T::one());
        }
        out
    }

    pub fn cast<U: Real>(&self) -> AdapterFactors<U> {
        AdapterFactors {
            scale: self.scale,
            entries: self
                .entries
                .iter()
                .map(|e| AdapterEntry {
                    block: e.block,
                    target: e.target,
                    p: e.p.cast(),
                    q: e.q.cast(),
                })
                .collect(),
        }
    }

    /// Rounds every factor entry to single precision, the archive format.
    pub fn round_to_storage(&mut self) {
        for e in &mut self.entries {
            for m in [&mut e.p, &mut e.q] {
                for v in m.as_mut_slice() {
                    *v = T::from_f64_lossy(v.as_f64() as f32 as f64);
                }
            }
        }
    }
}

/// `P = A1·U`, `Q = Vᵀ·B2` from the normalized state of every layer,
/// computed in double precision.
pub fn emit_adapter<T: Real>(state: &StreamState, params: &GeneratorParams<T>) -> Result<AdapterFactors<T>> {
    if state.states.len() != params.layers.len() {
        return Err(Error::Config("stream state does not match the generator".into()));
    }
    let entries = params
        .layers
        .iter()
        .zip(&state.states)
        .map(|(layer, s)| emit_entry(layer, s, &params.config))
        .collect::<Result<_>>()?;
    Ok(AdapterFactors {
        scale: params.config.scale,
        entries,
    })
}

pub(crate) fn emit_entry<T: Real>(
    layer: &GeneratorLayer<T>,
    s: &Matrix<f64>,
    config: &GeneratorConfig,
) -> Result<AdapterEntry<T>> {
    let (u, v) = normalized_factors(s, config)?;
    let p = layer.a1.cast::<f64>().matmul(&u)?;
    let q = Matrix::product(&v, true, &layer.b2.cast::<f64>(), false)?;
    Ok(AdapterEntry {
        block: layer.block,
        target: layer.target,
        p: p.cast(),
        q: q.cast(),
    })
}

/// `(U', V)` with `norm(S) = U'·Vᵀ` restricted to rank `r`; for the
/// truncating kinds the singular values are folded into `U'`.
pub(crate) fn normalized_factors(s: &Matrix<f64>, config: &GeneratorConfig) -> Result<(Matrix<f64>, Matrix<f64>)> {
    let r = config.rank;
    match config.norm {
        NormKind::Svd => svd_normalize(s, r, &config.svd),
        NormKind::Frobenius => truncated_factors(&frobenius_normalize(s), r, &config.svd),
        NormKind::None => truncated_factors(s, r, &config.svd),
    }
}

fn truncated_factors(m: &Matrix<f64>, rank: usize, config: &SvdConfig) -> Result<(Matrix<f64>, Matrix<f64>)> {
    let svd = low_rank_svd(m, rank, config)?;
    let keep = svd.retained();
    let s: Vec<f64> = (0..rank).map(|i| if i < keep { svd.singular_values[i] } else { 0.0 }).collect();
    let u = Matrix::from_fn(m.rows(), rank, |i, j| svd.left_vectors.get(i, j) * s[j]);
    let v = Matrix::from_fn(m.cols(), rank, |i, j| if j < keep { svd.right_vectors.get(i, j) } else { 0.0 });
    Ok((u, v))
}

/// Bakes `α·P·Q` into the injected projections of a copy of `model`.
pub fn merge_adapter<T: Real>(model: &BaseModel<T>, adapter: &AdapterFactors<T>) -> Result<BaseModel<T>> {
    let mut merged = model.clone();
    let alpha = T::from_f64_lossy(adapter.scale);
    for e in &adapter.entries {
        let block = merged
            .blocks
            .get_mut(e.block)
            .ok_or_else(|| Error::Config(format!("adapter for missing block {}", e.block)))?;
        let w = block.projection_mut(e.target);
        let delta = e.p.matmul(&e.q)?;
        if delta.shape() != w.shape() {
            return Err(Error::dim("merge_adapter", w.shape(), delta.shape()));
        }
        w.axpy(alpha, &delta)?;
    }
    Ok(merged)
}
