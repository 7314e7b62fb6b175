//! Command-line front end: configuration, subcommands and reports.

pub mod commands;
pub mod config;
pub mod error;
pub mod flops;
pub mod recall;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use genadapter::numerics::Precision;

use crate::commands::{AdaptArgs, Ctx, Dims, EvalArgs, FlopsArgs, GenerateArgs, RecallArgs, GRADCHECK_TOLERANCE};
use crate::config::RunConfig;
use crate::error::{CliError, Result};

#[derive(Debug, Parser)]
#[command(name = "genadapter", version, about = "Train and use a generative adapter over a toy byte-level model")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct GlobalArgs {
    /// TOML run configuration; every key is optional.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the `seed` key.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Overrides the `precision` key.
    #[arg(long, global = true, value_enum)]
    pub precision: Option<PrecisionArg>,
    /// Output directory for models, logs and reports.
    #[arg(long, global = true, default_value = "out")]
    pub out: PathBuf,
    /// Progress line interval in steps; 0 disables progress output.
    #[arg(long, global = true, default_value_t = 50)]
    pub log_every: usize,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum PrecisionArg {
    F32,
    F64,
}

impl From<PrecisionArg> for Precision {
    fn from(p: PrecisionArg) -> Self {
        match p {
            PrecisionArg::F32 => Precision::F32,
            PrecisionArg::F64 => Precision::F64,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum DimsArg {
    /// The architecture keys of the configuration.
    Config,
    /// 7B-class dimensions.
    Large,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Pretrain the toy base model on the corpus and freeze it.
    PretrainBase {
        /// Validate and print the resolved configuration without training.
        #[arg(long)]
        dry_run: bool,
    },
    /// Train the generator against a frozen base model.
    PretrainGenerator {
        /// Base model; defaults to `<out>/base.gamd`.
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        dry_run: bool,
    },
    /// Stream a context file into an adapter.
    Adapt {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        generator: PathBuf,
        #[arg(long)]
        context: PathBuf,
        /// Overrides the `chunk_size` key.
        #[arg(long)]
        chunk_size: Option<usize>,
        /// Defaults to `<out>/adapter.gadp`.
        #[arg(long)]
        adapter_out: Option<PathBuf>,
        /// Continue from a saved streaming state.
        #[arg(long)]
        resume_state: Option<PathBuf>,
        /// Save the final streaming state here.
        #[arg(long)]
        state_out: Option<PathBuf>,
        /// Let each chunk attend to earlier context tokens.
        #[arg(long)]
        cross_chunk: bool,
    },
    /// Generate text, optionally through an adapter.
    Generate {
        #[arg(long)]
        model: PathBuf,
        #[arg(long, requires = "generator")]
        adapter: Option<PathBuf>,
        /// Generator that produced the adapter, for the compatibility check.
        #[arg(long)]
        generator: Option<PathBuf>,
        #[arg(long)]
        prompt: String,
        #[arg(long, default_value_t = 64)]
        max_tokens: usize,
        /// Pick the most likely token instead of sampling.
        #[arg(long)]
        greedy: bool,
        #[arg(long, default_value_t = 1.0)]
        temperature: f64,
    },
    /// Held-out perplexities with and without the adapter.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        generator: PathBuf,
        /// Held-out files; default to the configured held-out data.
        #[arg(long)]
        heldout: Vec<PathBuf>,
        /// Row label in eval.csv.
        #[arg(long)]
        label: Option<String>,
    },
    /// Key/value recall through adapters of random pair lists.
    RecallBench {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        generator: PathBuf,
        #[arg(long, default_value_t = 16)]
        pairs: usize,
        #[arg(long, default_value_t = 4)]
        trials: usize,
    },
    /// Analytic compute and storage per context length.
    FlopsReport {
        #[arg(long, value_enum, default_value = "config")]
        dims: DimsArg,
        #[arg(long, value_delimiter = ',', default_value = "0,256,1024,4096")]
        context_lengths: Vec<usize>,
        #[arg(long, default_value_t = 64)]
        query_length: usize,
    },
    /// Finite-difference check of the training gradients.
    Gradcheck,
    /// Write the deterministic synthetic training corpus.
    SynthCorpus {
        #[arg(long, default_value_t = 1 << 20)]
        bytes: usize,
        #[arg(long)]
        file: PathBuf,
    },
}

/// Configuration after applying command-line overrides.
pub fn resolve(global: &GlobalArgs) -> Result<RunConfig> {
    let mut config = match &global.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = global.seed {
        config.seed = seed;
    }
    if let Some(p) = global.precision {
        config.precision = p.into();
    }
    config.check()?;
    Ok(config)
}

/// Runs one parsed invocation, printing results to stdout.
pub fn run(cli: Cli) -> Result<()> {
    let ctx = Ctx {
        config: resolve(&cli.global)?,
        out: cli.global.out.clone(),
        log_every: cli.global.log_every,
    };
    match cli.command {
        Command::PretrainBase { dry_run } => {
            match commands::pretrain_base(&ctx, dry_run)? {
                Some(report) => print!("{report}"),
                None => println!("wrote {}", ctx.path(commands::BASE_FILE).display()),
            }
        }
        Command::PretrainGenerator { model, dry_run } => {
            match commands::pretrain_generator(&ctx, model.as_deref(), dry_run)? {
                Some(report) => print!("{report}"),
                None => println!(
                    "{}",
                    std::fs::read_to_string(ctx.path(commands::GENERATOR_SUMMARY)).unwrap_or_default()
                ),
            }
        }
        Command::Adapt {
            model,
            generator,
            context,
            chunk_size,
            adapter_out,
            resume_state,
            state_out,
            cross_chunk,
        } => {
            let summary = commands::adapt(
                &ctx,
                &AdaptArgs {
                    model,
                    generator,
                    context,
                    chunk_size,
                    adapter_out,
                    resume: resume_state,
                    state_out,
                    cross_chunk_attention: cross_chunk,
                },
            )?;
            println!("{}", serde_json::to_string_pretty(&summary).expect("serializes"));
        }
        Command::Generate {
            model,
            adapter,
            generator,
            prompt,
            max_tokens,
            greedy,
            temperature,
        } => {
            let text = commands::generate_text(
                &ctx,
                &GenerateArgs {
                    model,
                    adapter,
                    generator,
                    prompt,
                    max_tokens,
                    greedy,
                    temperature,
                },
            )?;
            println!("{text}");
        }
        Command::Eval {
            model,
            generator,
            heldout,
            label,
        } => {
            let row = commands::eval(
                &ctx,
                &EvalArgs {
                    model,
                    generator,
                    heldout,
                    label,
                },
            )?;
            println!("{}\n{}", commands::EVAL_HEADER, row.to_csv());
        }
        Command::RecallBench {
            model,
            generator,
            pairs,
            trials,
        } => {
            let mut report = commands::recall_bench(
                &ctx,
                &RecallArgs {
                    model,
                    generator,
                    pairs,
                    trials,
                },
            )?;
            report.items.clear();
            println!("{}", serde_json::to_string_pretty(&report).expect("serializes"));
        }
        Command::FlopsReport {
            dims,
            context_lengths,
            query_length,
        } => {
            let dims = match dims {
                DimsArg::Config => Dims::Config,
                DimsArg::Large => Dims::Large,
            };
            let report = commands::flops_report(
                &ctx,
                &FlopsArgs {
                    dims,
                    context_lengths,
                    query_length,
                },
            )?;
            print!("{}", report.to_csv());
        }
        Command::Gradcheck => {
            let lines = commands::gradcheck(&ctx)?;
            let mut worst = 0.0f64;
            for l in &lines {
                println!(
                    "{:<20} {:<10} coords {:>5}  max rel err {:.3e}",
                    l.objective.to_string(),
                    l.norm.to_string(),
                    l.coordinates,
                    l.max_relative_error
                );
                // NaN counts as the worst possible error.
                if l.max_relative_error.is_nan() || l.max_relative_error > worst {
                    worst = l.max_relative_error;
                }
            }
            if worst.is_nan() || worst > GRADCHECK_TOLERANCE {
                return Err(CliError::Check(format!(
                    "max relative error {worst:.3e} exceeds {GRADCHECK_TOLERANCE:e}"
                )));
            }
        }
        Command::SynthCorpus { bytes, file } => {
            let n = commands::synth_corpus(&ctx, bytes, &file)?;
            println!("wrote {n} bytes to {}", file.display());
        }
    }
    Ok(())
}

/// Parses `args`, runs the command and returns the process exit status.
pub fn main_with_args<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
