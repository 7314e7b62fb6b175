//! Subcommand bodies. Each returns its structured result so tests can call
//! them in-process; printing is left to the binary.

use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use genadapter::context::{
    contextualize_from, load_adapter, load_state, save_adapter, save_state, AdapterArchive, ChunkPlan,
    ContextOptions,
};
use genadapter::generator::{init_state, load_generator, save_generator, GeneratorConfig, GeneratorParams, NormKind};
use genadapter::model::{
    generate, load_model, save_model, tokens, BaseModel, GenerateOptions, InjectionConfig, ModelConfig, Sampling,
};
use genadapter::numerics::{finite_difference_check, Precision, Real, SvdConfig};
use genadapter::training::{
    closed_book_perplexities, example_loss, make_examples, pretrain_base as train_base, synthetic_corpus, train,
    validate, LossOptions, Objective, Perplexities, StepRecord, TrainingExample,
};
use serde::Serialize;

use crate::config::RunConfig;
use crate::error::{CliError, Result};
use crate::flops::{large_model, CostModel, FlopsReport};
use crate::recall::{run_recall_bench, RecallReport};

pub const BASE_FILE: &str = "base.gamd";
pub const GENERATOR_FILE: &str = "generator.gagn";
pub const ADAPTER_FILE: &str = "adapter.gadp";
pub const STATE_FILE: &str = "state.gast";
pub const BASE_METRICS: &str = "base_metrics.jsonl";
pub const GENERATOR_METRICS: &str = "generator_metrics.jsonl";
pub const GENERATOR_SUMMARY: &str = "generator_summary.json";
pub const EVAL_CSV: &str = "eval.csv";
pub const RECALL_CSV: &str = "recall.csv";
pub const FLOPS_CSV: &str = "flops.csv";

/// Resolved settings shared by every command.
#[derive(Debug, Clone)]
pub struct Ctx {
    pub config: RunConfig,
    pub out: PathBuf,
    /// Progress lines go to stderr every this many steps (0 silences them).
    pub log_every: usize,
}

impl Ctx {
    pub fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn create_out(&self) -> Result<()> {
        fs::create_dir_all(&self.out).map_err(|e| CliError::io(&self.out, e))
    }

    fn log(&self, step: usize, line: impl FnOnce() -> String) {
        if self.log_every > 0 && step.is_multiple_of(self.log_every) {
            eprintln!("{}", line());
        }
    }
}

macro_rules! dispatch {
    ($precision:expr, $f:ident($($arg:expr),*)) => {
        match $precision {
            Precision::F32 => $f::<f32>($($arg),*),
            Precision::F64 => $f::<f64>($($arg),*),
        }
    };
}

fn read_tokens(paths: &[PathBuf]) -> Result<Vec<usize>> {
    let mut out = Vec::new();
    for p in paths {
        out.extend(tokens::encode(&fs::read(p).map_err(|e| CliError::io(p, e))?));
    }
    Ok(out)
}

/// Training tokens and held-out tokens. Without explicit held-out files the
/// tail `heldout_fraction` of the corpus is held out and not trained on.
pub fn load_data(config: &RunConfig) -> Result<(Vec<usize>, Vec<usize>)> {
    let mut corpus = read_tokens(&config.corpus_paths()?)?;
    let heldout = match config.heldout_paths()? {
        Some(paths) => read_tokens(&paths)?,
        None => {
            let keep = corpus.len() - (corpus.len() as f64 * config.heldout_fraction).round() as usize;
            corpus.split_off(keep)
        }
    };
    Ok((corpus, heldout))
}

/// Held-out examples, capped at `heldout_segments`.
pub fn heldout_examples(config: &RunConfig, heldout: &[usize]) -> Result<Vec<TrainingExample>> {
    let mut examples = make_examples(heldout, config.segment_length, config.seed ^ 0x4845_4c44)?;
    examples.truncate(config.heldout_segments);
    Ok(examples)
}

struct JsonLines {
    path: PathBuf,
    writer: BufWriter<File>,
    error: Option<std::io::Error>,
}

impl JsonLines {
    fn create(path: PathBuf) -> Result<Self> {
        let file = File::create(&path).map_err(|e| CliError::io(&path, e))?;
        Ok(Self {
            path,
            writer: BufWriter::new(file),
            error: None,
        })
    }

    fn push(&mut self, record: &impl Serialize) {
        if self.error.is_none() {
            let line = serde_json::to_string(record).expect("records serialize");
            if let Err(e) = writeln!(self.writer, "{line}") {
                self.error = Some(e);
            }
        }
    }

    fn finish(mut self) -> Result<()> {
        if let Some(e) = self.error.take() {
            return Err(CliError::io(&self.path, e));
        }
        self.writer.flush().map_err(|e| CliError::io(&self.path, e))
    }
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).map_err(|e| CliError::io(path, e))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    write_file(path, &(serde_json::to_string_pretty(value).expect("serializes") + "\n"))
}

/// Appends `row` to a CSV file, writing `header` first if the file is new.
fn append_csv(path: &Path, header: &str, row: &str) -> Result<()> {
    let fresh = !path.exists();
    let mut f = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| CliError::io(path, e))?;
    let text = if fresh { format!("{header}\n{row}\n") } else { format!("{row}\n") };
    f.write_all(text.as_bytes()).map_err(|e| CliError::io(path, e))
}

fn dry_run_report(ctx: &Ctx, outputs: &[&str]) -> String {
    let mut s = ctx.config.to_toml();
    s.push_str("\n# dry run: would write\n");
    for o in outputs {
        s.push_str(&format!("#   {}\n", ctx.path(o).display()));
    }
    s
}

fn check_architecture(config: &RunConfig, found: &ModelConfig) -> Result<()> {
    if *found != config.model() {
        return Err(CliError::Config(format!(
            "model file architecture {found:?} differs from the architecture keys {:?}",
            config.model()
        )));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Base pretraining

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BaseStep {
    pub step: usize,
    pub learning_rate: f64,
    pub loss: f64,
}

/// Trains the toy base model, freezes it and writes it with its metrics.
/// Returns `None` on a dry run, otherwise the model path.
pub fn pretrain_base(ctx: &Ctx, dry_run: bool) -> Result<Option<String>> {
    let (corpus, _) = load_data(&ctx.config)?;
    if dry_run {
        return Ok(Some(dry_run_report(ctx, &[BASE_FILE, BASE_METRICS])));
    }
    dispatch!(ctx.config.precision, pretrain_base_as(ctx, &corpus)).map(|_| None)
}

fn pretrain_base_as<T: Real>(ctx: &Ctx, corpus: &[usize]) -> Result<()> {
    ctx.create_out()?;
    let config = ctx.config.base();
    let mut model = BaseModel::<T>::new(ctx.config.model(), ctx.config.seed)?;
    let mut log = JsonLines::create(ctx.path(BASE_METRICS))?;
    let start = Instant::now();
    train_base(&mut model, corpus, &config, |step, learning_rate, loss| {
        log.push(&BaseStep {
            step,
            learning_rate,
            loss,
        });
        ctx.log(step, || {
            format!("base step {step} loss {loss:.4} lr {learning_rate:.2e} {:.0}s", start.elapsed().as_secs_f64())
        });
    })?;
    log.finish()?;
    model.freeze();
    save_model(&model, &ctx.path(BASE_FILE))?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Generator pretraining

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GeneratorSummary {
    pub objective: Objective,
    pub norm: NormKind,
    pub steps: usize,
    pub heldout_segments: usize,
    pub validation: Perplexities,
    pub closed_book: Perplexities,
    pub base_checksum: String,
}

pub fn pretrain_generator(ctx: &Ctx, model: Option<&Path>, dry_run: bool) -> Result<Option<String>> {
    let (corpus, heldout) = load_data(&ctx.config)?;
    let model_path = model.map(Path::to_path_buf).unwrap_or_else(|| ctx.path(BASE_FILE));
    if dry_run {
        let mut s = dry_run_report(ctx, &[GENERATOR_FILE, GENERATOR_METRICS, GENERATOR_SUMMARY]);
        s.push_str(&format!("# base model: {}\n", model_path.display()));
        return Ok(Some(s));
    }
    dispatch!(ctx.config.precision, pretrain_generator_as(ctx, &model_path, &corpus, &heldout)).map(|_| None)
}

fn pretrain_generator_as<T: Real>(ctx: &Ctx, model_path: &Path, corpus: &[usize], heldout: &[usize]) -> Result<()> {
    let model: BaseModel<T> = load_model(model_path)?;
    check_architecture(&ctx.config, model.config())?;
    let heldout = heldout_examples(&ctx.config, heldout)?;
    ctx.create_out()?;
    let params = GeneratorParams::<T>::new(
        *model.config(),
        ctx.config.injection()?,
        ctx.config.generator(),
        ctx.config.seed,
    )?;
    let config = ctx.config.train();
    let mut log = JsonLines::create(ctx.path(GENERATOR_METRICS))?;
    let start = Instant::now();
    let outcome = train(&model, params, corpus, &heldout, &config, |r: &StepRecord| {
        log.push(r);
        ctx.log(r.step, || {
            format!(
                "generator step {} loss {:.4} grad {:.3} lr {:.2e} {:.0}s",
                r.step,
                r.loss,
                r.grad_norm,
                r.learning_rate,
                start.elapsed().as_secs_f64()
            )
        });
    })?;
    log.finish()?;
    save_generator(&outcome.params, &ctx.path(GENERATOR_FILE))?;
    let summary = GeneratorSummary {
        objective: config.objective,
        norm: config.norm,
        steps: config.total_steps,
        heldout_segments: heldout.len(),
        validation: validate(&model, &outcome.params, &heldout, config.chunk_size)?,
        closed_book: closed_book_perplexities(&model, &outcome.params, &heldout, config.chunk_size)?,
        base_checksum: model.checksum(),
    };
    write_json(&ctx.path(GENERATOR_SUMMARY), &summary)
}

// ---------------------------------------------------------------------------
// Adaptation

#[derive(Debug, Clone, Default)]
pub struct AdaptArgs {
    pub model: PathBuf,
    pub generator: PathBuf,
    pub context: PathBuf,
    pub chunk_size: Option<usize>,
    /// Adapter destination; defaults to `<out>/adapter.gadp`.
    pub adapter_out: Option<PathBuf>,
    /// State archive to resume from.
    pub resume: Option<PathBuf>,
    /// Where to write the final state for later resumption.
    pub state_out: Option<PathBuf>,
    pub cross_chunk_attention: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AdaptSummary {
    pub adapter: PathBuf,
    pub state: Option<PathBuf>,
    pub context_tokens: usize,
    pub tokens_consumed: u64,
    pub chunks_consumed: u64,
    pub adapter_floats: usize,
    pub zero_adapter: bool,
}

pub fn adapt(ctx: &Ctx, args: &AdaptArgs) -> Result<AdaptSummary> {
    dispatch!(ctx.config.precision, adapt_as(ctx, args))
}

fn adapt_as<T: Real>(ctx: &Ctx, args: &AdaptArgs) -> Result<AdaptSummary> {
    let model: BaseModel<T> = load_model(&args.model)?;
    let params: GeneratorParams<T> = load_generator(&args.generator)?;
    params.check_model(&model)?;
    let fingerprint = params.fingerprint();
    let context = read_tokens(std::slice::from_ref(&args.context))?;
    let chunk_size = args.chunk_size.unwrap_or(ctx.config.chunk_size);
    let plan = ChunkPlan::new(context.len(), chunk_size)?;
    let state = match &args.resume {
        Some(path) => load_state(path, &fingerprint)?,
        None => init_state(&params),
    };
    if context.is_empty() && state.tokens_consumed() == 0 {
        eprintln!("warning: empty context; the adapter is zero");
    }
    let options = ContextOptions {
        cross_chunk_attention: args.cross_chunk_attention,
    };
    let (state, adapter) = contextualize_from(&model, &params, state, &context, &plan, options)?;
    let adapter_path = args.adapter_out.clone().unwrap_or_else(|| ctx.path(ADAPTER_FILE));
    if let Some(dir) = adapter_path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    let summary = AdaptSummary {
        adapter: adapter_path.clone(),
        state: args.state_out.clone(),
        context_tokens: context.len(),
        tokens_consumed: state.tokens_consumed(),
        chunks_consumed: state.chunks_consumed(),
        adapter_floats: adapter.num_floats(),
        zero_adapter: adapter.is_zero(),
    };
    save_adapter(
        &AdapterArchive {
            fingerprint,
            adapter,
            tokens_consumed: state.tokens_consumed(),
            chunks_consumed: state.chunks_consumed(),
        },
        &adapter_path,
    )?;
    if let Some(path) = &args.state_out {
        save_state(&state, &fingerprint, path)?;
    }
    Ok(summary)
}

// ---------------------------------------------------------------------------
// Generation

#[derive(Debug, Clone, Default)]
pub struct GenerateArgs {
    pub model: PathBuf,
    pub adapter: Option<PathBuf>,
    /// Needed with `adapter` to check the archive's fingerprint.
    pub generator: Option<PathBuf>,
    pub prompt: String,
    pub max_tokens: usize,
    pub greedy: bool,
    pub temperature: f64,
}

/// Generated bytes after `BOS + prompt`, decoded lossily.
pub fn generate_text(ctx: &Ctx, args: &GenerateArgs) -> Result<String> {
    dispatch!(ctx.config.precision, generate_as(ctx, args))
}

fn generate_as<T: Real>(ctx: &Ctx, args: &GenerateArgs) -> Result<String> {
    let model: BaseModel<T> = load_model(&args.model)?;
    let adapter = match (&args.adapter, &args.generator) {
        (None, _) => None,
        (Some(_), None) => {
            return Err(CliError::Config(
                "an adapter needs `--generator` so its fingerprint can be checked".into(),
            ))
        }
        (Some(a), Some(g)) => {
            let params: GeneratorParams<T> = load_generator(g)?;
            params.check_model(&model)?;
            Some(load_adapter::<T>(a, &params.fingerprint())?.adapter)
        }
    };
    let mut prompt = vec![tokens::BOS];
    prompt.extend(tokens::encode(args.prompt.as_bytes()));
    let sampling = if args.greedy {
        Sampling::Greedy
    } else {
        Sampling::Temperature {
            temperature: args.temperature,
            seed: ctx.config.seed,
        }
    };
    let opts = GenerateOptions {
        max_tokens: args.max_tokens,
        sampling,
        ..GenerateOptions::default()
    };
    let out = generate(&model, adapter.as_ref(), &prompt, &opts)?;
    Ok(String::from_utf8_lossy(&tokens::decode(&out)).into_owned())
}

// ---------------------------------------------------------------------------
// Evaluation

#[derive(Debug, Clone, Default)]
pub struct EvalArgs {
    pub model: PathBuf,
    pub generator: PathBuf,
    /// Held-out files; defaults to the configured held-out data.
    pub heldout: Vec<PathBuf>,
    /// Row label; defaults to the generator file name.
    pub label: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalRow {
    pub label: String,
    pub norm: NormKind,
    pub targets: String,
    pub segments: usize,
    pub reconstruction_ppl: f64,
    pub completion_ppl: f64,
    pub closed_book_reconstruction_ppl: f64,
    pub closed_book_completion_ppl: f64,
}

pub const EVAL_HEADER: &str = "label,norm,targets,segments,reconstruction_ppl,completion_ppl,\
closed_book_reconstruction_ppl,closed_book_completion_ppl";

impl EvalRow {
    pub fn to_csv(&self) -> String {
        format!(
            "{},{},{},{},{:.6},{:.6},{:.6},{:.6}",
            self.label,
            self.norm,
            self.targets,
            self.segments,
            self.reconstruction_ppl,
            self.completion_ppl,
            self.closed_book_reconstruction_ppl,
            self.closed_book_completion_ppl
        )
    }
}

/// Held-out perplexities with and without the adapter; appends a row to
/// `<out>/eval.csv`.
pub fn eval(ctx: &Ctx, args: &EvalArgs) -> Result<EvalRow> {
    let heldout = if args.heldout.is_empty() {
        load_data(&ctx.config)?.1
    } else {
        read_tokens(&args.heldout)?
    };
    let examples = heldout_examples(&ctx.config, &heldout)?;
    let row = dispatch!(ctx.config.precision, eval_as(ctx, args, &examples))?;
    ctx.create_out()?;
    append_csv(&ctx.path(EVAL_CSV), EVAL_HEADER, &row.to_csv())?;
    Ok(row)
}

fn eval_as<T: Real>(ctx: &Ctx, args: &EvalArgs, examples: &[TrainingExample]) -> Result<EvalRow> {
    let model: BaseModel<T> = load_model(&args.model)?;
    let params: GeneratorParams<T> = load_generator(&args.generator)?;
    params.check_model(&model)?;
    let chunk = ctx.config.chunk_size;
    let adapted = validate(&model, &params, examples, chunk)?;
    let closed = closed_book_perplexities(&model, &params, examples, chunk)?;
    let label = args.label.clone().unwrap_or_else(|| {
        args.generator
            .file_stem()
            .map_or_else(|| "generator".into(), |s| s.to_string_lossy().into_owned())
    });
    let targets: Vec<String> = params.injection().targets().iter().map(|t| t.to_string()).collect();
    Ok(EvalRow {
        label,
        norm: params.config().norm,
        targets: targets.join("+"),
        segments: examples.len(),
        reconstruction_ppl: adapted.reconstruction,
        completion_ppl: adapted.completion,
        closed_book_reconstruction_ppl: closed.reconstruction,
        closed_book_completion_ppl: closed.completion,
    })
}

// ---------------------------------------------------------------------------
// Recall benchmark

#[derive(Debug, Clone, Default)]
pub struct RecallArgs {
    pub model: PathBuf,
    pub generator: PathBuf,
    pub pairs: usize,
    pub trials: usize,
}

/// Runs the benchmark and writes `<out>/recall.csv`.
pub fn recall_bench(ctx: &Ctx, args: &RecallArgs) -> Result<RecallReport> {
    let report = dispatch!(ctx.config.precision, recall_as(ctx, args))?;
    ctx.create_out()?;
    write_file(&ctx.path(RECALL_CSV), &report.to_csv())?;
    Ok(report)
}

fn recall_as<T: Real>(ctx: &Ctx, args: &RecallArgs) -> Result<RecallReport> {
    let model: BaseModel<T> = load_model(&args.model)?;
    let params: GeneratorParams<T> = load_generator(&args.generator)?;
    params.check_model(&model)?;
    run_recall_bench(&model, &params, args.pairs, args.trials, ctx.config.chunk_size, ctx.config.seed)
}

// ---------------------------------------------------------------------------
// Cost report

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Dims {
    /// The architecture keys of the configuration.
    #[default]
    Config,
    /// 7B-class dimensions with `d_r = 1024`, `r = 128`.
    Large,
}

#[derive(Debug, Clone)]
pub struct FlopsArgs {
    pub dims: Dims,
    pub context_lengths: Vec<usize>,
    pub query_length: usize,
}

/// Analytic costs per context length; writes `<out>/flops.csv`.
pub fn flops_report(ctx: &Ctx, args: &FlopsArgs) -> Result<FlopsReport> {
    let c = &ctx.config;
    let (model, intermediate_dim, rank) = match args.dims {
        Dims::Config => (c.model(), c.intermediate_dim, c.rank),
        Dims::Large => large_model(),
    };
    let cost = CostModel {
        model,
        injection: c.injection()?,
        intermediate_dim,
        rank,
        power_iterations: c.power_iterations,
        chunk_size: c.chunk_size,
        query_length: args.query_length,
    };
    let report = cost.report(&args.context_lengths);
    ctx.create_out()?;
    write_file(&ctx.path(FLOPS_CSV), &report.to_csv())?;
    Ok(report)
}

// ---------------------------------------------------------------------------
// Gradient check

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradCheckLine {
    pub objective: Objective,
    pub norm: NormKind,
    pub coordinates: usize,
    pub max_relative_error: f64,
}

/// Tolerance of the end-to-end gradient check.
pub const GRADCHECK_TOLERANCE: f64 = 1e-4;

/// Finite-difference check of the full training loss against every
/// generator parameter at `L = 2, d_h = 8, d_r = 4, r = 2`, in double
/// precision, for each objective and normalization.
pub fn gradcheck(ctx: &Ctx) -> Result<Vec<GradCheckLine>> {
    let model_config = ModelConfig {
        num_layers: 2,
        hidden_dim: 8,
        num_heads: 2,
        ffn_dim: 16,
        max_seq_len: 64,
        ..ModelConfig::default()
    };
    let mut model = BaseModel::<f64>::new(model_config, ctx.config.seed)?;
    // Larger weights than the init so every path carries signal.
    for t in model.tensors_mut()? {
        if t.rows() > 1 {
            *t = t.scale(8.0);
        }
    }
    model.freeze();
    let text = synthetic_corpus(200, ctx.config.seed);
    let example = TrainingExample::new(0, tokens::encode(&text.as_bytes()[..20]), 12)?;
    let mut lines = Vec::new();
    for objective in [Objective::Both, Objective::ReconstructionOnly, Objective::CompletionOnly] {
        for norm in [NormKind::Svd, NormKind::Frobenius, NormKind::None] {
            let params = GeneratorParams::<f64>::new(
                model_config,
                InjectionConfig::default(),
                GeneratorConfig {
                    intermediate_dim: 4,
                    rank: 2,
                    scale: 0.5,
                    norm,
                    svd: SvdConfig::default(),
                },
                ctx.config.seed,
            )?;
            let values: Vec<_> = params.tensors().into_iter().cloned().collect();
            let options = LossOptions {
                objective,
                chunk_size: 4,
                truncate_unroll: false,
            };
            let report = finite_difference_check(&values, 1e-6, |tape, vars| {
                let bound = model.bind(tape, false);
                let generator: Vec<_> = vars
                    .chunks(4)
                    .map(|c| genadapter::generator::BoundGeneratorLayer {
                        a1: c[0],
                        a2: c[1],
                        b1: c[2],
                        b2: c[3],
                    })
                    .collect();
                Ok(example_loss(tape, &bound, &params, &generator, &example, &options)?.total)
            })?;
            lines.push(GradCheckLine {
                objective,
                norm,
                coordinates: report.coordinates_checked,
                max_relative_error: report.max_relative_error,
            });
        }
    }
    Ok(lines)
}

// ---------------------------------------------------------------------------
// Synthetic corpus

/// Writes `bytes` bytes of the deterministic synthetic corpus to `path`.
pub fn synth_corpus(ctx: &Ctx, bytes: usize, path: &Path) -> Result<usize> {
    let text = synthetic_corpus(bytes, ctx.config.seed);
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    write_file(path, &text)?;
    Ok(text.len())
}

