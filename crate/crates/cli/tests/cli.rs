//! End-to-end behavior of the `genadapter` binary on a tiny configuration.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use genadapter::context::load_state;
use genadapter::generator::{load_generator, GeneratorParams};
use genadapter::model::{count_parameters, InjectionConfig, ModelConfig};
use genadapter_cli::config::RunConfig;
use tempfile::TempDir;

const TINY: &str = r#"
corpus = "corpus.txt"
num_layers = 2
hidden_dim = 16
num_heads = 2
ffn_dim = 32
max_seq_len = 64
intermediate_dim = 8
rank = 2
total_steps = 3
warmup_steps = 1
batch_size = 2
chunk_size = 8
segment_length = 32
heldout_fraction = 0.1
heldout_segments = 4
base_steps = 5
base_warmup_steps = 1
base_batch_size = 2
base_seq_len = 32
"#;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_genadapter"))
}

fn run(dir: &Path, args: &[&str]) -> Output {
    bin().current_dir(dir).args(args).output().expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = run(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

/// Tiny corpus, config, base model and generator in a fresh directory.
fn trained() -> TempDir {
    let dir = TempDir::new().unwrap();
    let d = dir.path();
    std::fs::write(d.join("tiny.toml"), TINY).unwrap();
    ok(d, &["--config", "tiny.toml", "synth-corpus", "--bytes", "20000", "--file", "corpus.txt"]);
    ok(d, &["--config", "tiny.toml", "pretrain-base"]);
    ok(d, &["--config", "tiny.toml", "pretrain-generator"]);
    dir
}

fn files(dir: &Path) -> Vec<PathBuf> {
    let mut v: Vec<_> = walk(dir);
    v.sort();
    v
}

fn walk(dir: &Path) -> Vec<PathBuf> {
    std::fs::read_dir(dir)
        .unwrap()
        .flat_map(|e| {
            let p = e.unwrap().path();
            if p.is_dir() {
                walk(&p)
            } else {
                vec![p]
            }
        })
        .collect()
}

#[test]
fn shipped_toy_config_is_the_defaults() {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/toy.toml");
    let mut c = RunConfig::load(&path).unwrap();
    assert!(c.corpus.is_some());
    c.corpus = None;
    assert_eq!(c, RunConfig::default());
}

#[test]
fn missing_corpus_exits_2_naming_the_key() {
    let dir = TempDir::new().unwrap();
    for cmd in ["pretrain-base", "pretrain-generator"] {
        let out = run(dir.path(), &[cmd]);
        assert_eq!(out.status.code(), Some(2));
        assert!(String::from_utf8_lossy(&out.stderr).contains("`corpus`"));
    }
    std::fs::write(dir.path().join("c.toml"), "corpus = \"nope.txt\"").unwrap();
    let out = run(dir.path(), &["--config", "c.toml", "pretrain-base"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("nope.txt"));
}

#[test]
fn bad_config_files_exit_2() {
    let dir = TempDir::new().unwrap();
    for (text, needle) in [("hidden_dm = 3", "hidden_dm"), ("rank = \"x\"", "string"), ("norm = \"l2\"", "l2")] {
        std::fs::write(dir.path().join("c.toml"), text).unwrap();
        let out = run(dir.path(), &["--config", "c.toml", "flops-report"]);
        assert_eq!(out.status.code(), Some(2), "{text}");
        assert!(String::from_utf8_lossy(&out.stderr).contains(needle), "{text}");
    }
    assert_eq!(run(dir.path(), &["no-such-command"]).status.code(), Some(2));
}

#[test]
fn dry_run_prints_config_and_writes_nothing() {
    let dir = TempDir::new().unwrap();
    let d = dir.path();
    std::fs::write(d.join("tiny.toml"), TINY).unwrap();
    std::fs::write(d.join("corpus.txt"), "some text").unwrap();
    let before = files(d);
    for cmd in ["pretrain-base", "pretrain-generator"] {
        let out = ok(d, &["--config", "tiny.toml", "--seed", "9", cmd, "--dry-run"]);
        let printed = RunConfig::parse(out.split("\n# dry run").next().unwrap()).unwrap();
        assert_eq!(printed.seed, 9);
        assert_eq!(printed.hidden_dim, 16);
    }
    assert_eq!(files(d), before);
}

#[test]
fn pipeline_artifacts_load_and_validate() {
    let dir = trained();
    let d = dir.path();
    let metrics = std::fs::read_to_string(d.join("out/generator_metrics.jsonl")).unwrap();
    assert_eq!(metrics.lines().count(), 3);
    for line in metrics.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        assert!(v["loss"].as_f64().unwrap().is_finite());
    }
    assert_eq!(std::fs::read_to_string(d.join("out/base_metrics.jsonl")).unwrap().lines().count(), 5);
    let summary: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(d.join("out/generator_summary.json")).unwrap()).unwrap();
    assert!(summary["validation"]["completion"].as_f64().unwrap() > 1.0);

    let params: GeneratorParams<f64> = load_generator(&d.join("out/generator.gagn")).unwrap();
    let model_config = ModelConfig {
        num_layers: 2,
        hidden_dim: 16,
        num_heads: 2,
        ffn_dim: 32,
        max_seq_len: 64,
        ..ModelConfig::default()
    };
    assert_eq!(
        params.tensors().iter().map(|t| t.len() as u64).sum::<u64>(),
        count_parameters(&model_config, &InjectionConfig::default(), 8, 2).generator
    );

    let args = ["--config", "tiny.toml", "eval", "--model", "out/base.gamd", "--generator", "out/generator.gagn"];
    ok(d, &args);
    ok(d, &args);
    let csv = std::fs::read_to_string(d.join("out/eval.csv")).unwrap();
    let lines: Vec<_> = csv.lines().collect();
    assert_eq!(lines.len(), 3);
    assert_eq!(lines[0], genadapter_cli::commands::EVAL_HEADER);
    assert_eq!(lines[1], lines[2]);
    assert!(lines[1].starts_with("generator,svd,attention-output,4,"));
}

#[test]
fn adapt_generate_and_resume() {
    let dir = trained();
    let d = dir.path();
    let base = ["--config", "tiny.toml"];
    let with = |extra: &[&str]| -> Vec<String> { base.iter().chain(extra).map(|s| s.to_string()).collect() };
    let runs = |extra: &[&str]| {
        let a = with(extra);
        ok(d, &a.iter().map(String::as_str).collect::<Vec<_>>())
    };
    let text: String = std::fs::read_to_string(d.join("corpus.txt")).unwrap().chars().take(96).collect();
    std::fs::write(d.join("ctx.txt"), &text).unwrap();
    std::fs::write(d.join("ctx_a.txt"), &text[..48]).unwrap();
    std::fs::write(d.join("ctx_b.txt"), &text[48..]).unwrap();
    std::fs::write(d.join("empty.txt"), "").unwrap();
    let adapt = ["adapt", "--model", "out/base.gamd", "--generator", "out/generator.gagn"];

    // An empty context gives a zero adapter and a warning.
    let out = run(
        d,
        &with(&[&adapt[..], &["--context", "empty.txt", "--adapter-out", "zero.gadp"]].concat())
            .iter()
            .map(String::as_str)
            .collect::<Vec<_>>(),
    );
    assert!(out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("warning"));
    let summary: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(summary["zero_adapter"], true);

    // Chunk sizes 4 and 8 both produce archives that load and run.
    for chunk in ["4", "8"] {
        let name = format!("c{chunk}.gadp");
        runs(&[&adapt[..], &["--context", "ctx.txt", "--chunk-size", chunk, "--adapter-out", &name]].concat());
        let g = [
            "generate", "--model", "out/base.gamd", "--adapter", &name, "--generator", "out/generator.gagn",
            "--prompt", "Mira", "--max-tokens", "8", "--greedy",
        ];
        runs(&g);
    }

    // Two resumed halves match the uninterrupted run.
    runs(&[&adapt[..], &["--context", "ctx.txt", "--state-out", "full.gast"]].concat());
    runs(&[&adapt[..], &["--context", "ctx_a.txt", "--state-out", "half.gast"]].concat());
    runs(&[&adapt[..], &["--context", "ctx_b.txt", "--resume-state", "half.gast", "--state-out", "resumed.gast"]].concat());
    let params: GeneratorParams<f64> = load_generator(&d.join("out/generator.gagn")).unwrap();
    let fp = params.fingerprint();
    let full = load_state(&d.join("full.gast"), &fp).unwrap();
    let resumed = load_state(&d.join("resumed.gast"), &fp).unwrap();
    assert_eq!(full.tokens_consumed(), resumed.tokens_consumed());
    assert_eq!(full.chunks_consumed(), resumed.chunks_consumed());
    for (a, b) in full.states().iter().zip(resumed.states()) {
        let scale = a.max_abs().max(1e-300);
        assert!(a.max_abs_diff(b).unwrap() / scale <= 1e-12);
    }

    // No adapter and the zero adapter decode identically under greedy.
    let gen = ["generate", "--model", "out/base.gamd", "--prompt", "In the", "--max-tokens", "12", "--greedy"];
    let plain = runs(&gen);
    let zero = runs(&[&gen[..], &["--adapter", "zero.gadp", "--generator", "out/generator.gagn"]].concat());
    assert_eq!(plain, zero);

    // Seeded sampling is reproducible.
    let sample = ["--seed", "3", "generate", "--model", "out/base.gamd", "--prompt", "A", "--max-tokens", "16"];
    assert_eq!(runs(&sample), runs(&sample));
}

#[test]
fn incompatible_artifacts_fail() {
    let dir = trained();
    let d = dir.path();
    std::fs::write(d.join("ctx.txt"), "ABCD:1234\n").unwrap();
    ok(
        d,
        &[
            "--config", "tiny.toml", "adapt", "--model", "out/base.gamd", "--generator", "out/generator.gagn",
            "--context", "ctx.txt", "--adapter-out", "a.gadp",
        ],
    );
    // A generator with another rank has another fingerprint.
    std::fs::write(d.join("other.toml"), TINY.replace("rank = 2", "rank = 3")).unwrap();
    ok(d, &["--config", "other.toml", "--out", "other", "pretrain-generator", "--model", "out/base.gamd"]);
    let out = run(
        d,
        &[
            "generate", "--model", "out/base.gamd", "--adapter", "a.gadp", "--generator", "other/generator.gagn",
            "--prompt", "x", "--greedy",
        ],
    );
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("fingerprint"));
    // An adapter without its generator is a usage error.
    let out = run(d, &["generate", "--model", "out/base.gamd", "--adapter", "a.gadp", "--prompt", "x"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn recall_bench_with_no_pairs_is_empty() {
    let dir = trained();
    let d = dir.path();
    let out = ok(
        d,
        &[
            "--config", "tiny.toml", "recall-bench", "--model", "out/base.gamd", "--generator", "out/generator.gagn",
            "--pairs", "0",
        ],
    );
    let report: serde_json::Value = serde_json::from_str(&out).unwrap();
    assert!(report["adapted_exact_match"].is_null());
    assert_eq!(
        std::fs::read_to_string(d.join("out/recall.csv")).unwrap(),
        format!("{}\n", genadapter_cli::recall::CSV_HEADER)
    );
}

#[test]
fn commands_are_deterministic() {
    let a = trained();
    let b = trained();
    for f in ["base.gamd", "generator.gagn", "generator_metrics.jsonl", "base_metrics.jsonl"] {
        assert_eq!(
            std::fs::read(a.path().join("out").join(f)).unwrap(),
            std::fs::read(b.path().join("out").join(f)).unwrap(),
            "{f}"
        );
    }
}

#[test]
fn flops_report_and_gradcheck() {
    let dir = TempDir::new().unwrap();
    let d = dir.path();
    let csv = ok(d, &["flops-report", "--dims", "large", "--context-lengths", "0,1024"]);
    assert_eq!(csv, std::fs::read_to_string(d.join("out/flops.csv")).unwrap());
    let adapted: Vec<_> = csv.lines().filter(|l| l.contains(",adapted,")).collect();
    assert!(adapted.iter().all(|l| l.ends_with(",33554432")));
    let out = ok(d, &["gradcheck"]);
    assert_eq!(out.lines().count(), 9);
}
