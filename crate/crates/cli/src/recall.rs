//! Synthetic key/value recall through an adapter.

use genadapter::context::{contextualize, ChunkPlan};
use genadapter::generator::{AdapterFactors, GeneratorParams};
use genadapter::model::{generate, tokens, BaseModel, GenerateOptions};
use genadapter::numerics::Real;
use genadapter::training::{random_pairs, render_pairs, RecallPair, VALUE_LEN};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::Result;

/// Pairs to memorize and the prompts that query them.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RecallTask {
    pub pairs: Vec<RecallPair>,
}

impl RecallTask {
    pub fn random(count: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            pairs: random_pairs(count, rng),
        }
    }

    /// The context text: one `key:value` line per pair.
    pub fn render(&self) -> String {
        render_pairs(&self.pairs)
    }

    /// Prompt for one pair: BOS then `key:`.
    pub fn query(pair: &RecallPair) -> Vec<usize> {
        let mut prompt = vec![tokens::BOS];
        prompt.extend(tokens::encode(format!("{}:", pair.key).as_bytes()));
        prompt
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RecallItem {
    pub trial: usize,
    pub key: String,
    pub value: String,
    pub adapted: String,
    pub control: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RecallReport {
    pub pairs: usize,
    pub trials: usize,
    pub seed: u64,
    /// `None` when there was nothing to query.
    pub adapted_exact_match: Option<f64>,
    pub adapted_f1: Option<f64>,
    pub control_exact_match: Option<f64>,
    pub control_f1: Option<f64>,
    pub items: Vec<RecallItem>,
}

pub const CSV_HEADER: &str = "trial,key,value,adapted,control,adapted_exact,control_exact,adapted_f1,control_f1";

impl RecallReport {
    pub fn to_csv(&self) -> String {
        let mut out = format!("{CSV_HEADER}\n");
        for it in &self.items {
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{:.6},{:.6}\n",
                it.trial,
                it.key,
                it.value,
                csv_field(&it.adapted),
                csv_field(&it.control),
                u8::from(it.adapted == it.value),
                u8::from(it.control == it.value),
                token_f1(&it.adapted, &it.value),
                token_f1(&it.control, &it.value),
            ));
        }
        out
    }
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n', '\r']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

/// F1 of the byte multisets of `prediction` and `reference`.
pub fn token_f1(prediction: &str, reference: &str) -> f64 {
    let mut counts = [0i64; 256];
    for b in reference.bytes() {
        counts[b as usize] += 1;
    }
    let mut common = 0;
    for b in prediction.bytes() {
        if counts[b as usize] > 0 {
            counts[b as usize] -= 1;
            common += 1;
        }
    }
    if common == 0 {
        return 0.0;
    }
    let p = common as f64 / prediction.len() as f64;
    let r = common as f64 / reference.len() as f64;
    2.0 * p * r / (p + r)
}

fn answer<T: Real>(model: &BaseModel<T>, adapter: Option<&AdapterFactors<T>>, pair: &RecallPair) -> Result<String> {
    let opts = GenerateOptions {
        max_tokens: VALUE_LEN + 1,
        stop: vec![b'\n' as usize],
        ..GenerateOptions::default()
    };
    let out = generate(model, adapter, &RecallTask::query(pair), &opts)?;
    let text = String::from_utf8_lossy(&tokens::decode(&out)).into_owned();
    Ok(text.trim_end_matches('\n').to_string())
}

/// Adapts on `trials` random tasks of `pairs` pairs each and queries every
/// key greedily with and without the adapter.
pub fn run_recall_bench<T: Real>(
    model: &BaseModel<T>,
    params: &GeneratorParams<T>,
    pairs: usize,
    trials: usize,
    chunk_size: usize,
    seed: u64,
) -> Result<RecallReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut items = Vec::new();
    for trial in 0..trials {
        let task = RecallTask::random(pairs, &mut rng);
        if task.pairs.is_empty() {
            continue;
        }
        let context = tokens::encode(task.render().as_bytes());
        let plan = ChunkPlan::new(context.len(), chunk_size)?;
        let (_, adapter) = contextualize(model, params, &context, &plan)?;
        for pair in &task.pairs {
            items.push(RecallItem {
                trial,
                key: pair.key.clone(),
                value: pair.value.clone(),
                adapted: answer(model, Some(&adapter), pair)?,
                control: answer(model, None, pair)?,
            });
        }
    }
    let mean = |f: &dyn Fn(&RecallItem) -> f64| {
        (!items.is_empty()).then(|| items.iter().map(f).sum::<f64>() / items.len() as f64)
    };
    Ok(RecallReport {
        pairs,
        trials,
        seed,
        adapted_exact_match: mean(&|i| f64::from(u8::from(i.adapted == i.value))),
        adapted_f1: mean(&|i| token_f1(&i.adapted, &i.value)),
        control_exact_match: mean(&|i| f64::from(u8::from(i.control == i.value))),
        control_f1: mean(&|i| token_f1(&i.control, &i.value)),
        items,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use genadapter::generator::GeneratorConfig;
    use genadapter::model::{InjectionConfig, ModelConfig};

    #[test]
    fn f1_examples() {
        assert_eq!(token_f1("4821", "4821"), 1.0);
        assert_eq!(token_f1("", "4821"), 0.0);
        assert_eq!(token_f1("9999", "4821"), 0.0);
        assert!((token_f1("48", "4821") - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(token_f1("1284", "4821"), 1.0);
    }

    #[test]
    fn rendering_and_queries() {
        let task = RecallTask {
            pairs: vec![RecallPair {
                key: "ABCD".into(),
                value: "1234".into(),
            }],
        };
        assert_eq!(task.render(), "ABCD:1234\n");
        assert_eq!(RecallTask::query(&task.pairs[0])[1..], tokens::encode(b"ABCD:")[..]);
    }

    fn tiny() -> (BaseModel<f64>, GeneratorParams<f64>) {
        let cfg = ModelConfig {
            num_layers: 1,
            hidden_dim: 8,
            num_heads: 2,
            ffn_dim: 16,
            max_seq_len: 32,
            ..ModelConfig::default()
        };
        let g = GeneratorConfig {
            intermediate_dim: 4,
            rank: 2,
            ..GeneratorConfig::default()
        };
        let params = GeneratorParams::new(cfg, InjectionConfig::default(), g, 0).unwrap();
        (BaseModel::new(cfg, 0).unwrap(), params)
    }

    #[test]
    fn zero_pairs_give_an_empty_report() {
        let (model, params) = tiny();
        let r = run_recall_bench(&model, &params, 0, 3, 16, 0).unwrap();
        assert!(r.items.is_empty());
        assert_eq!(r.adapted_exact_match, None);
        assert_eq!(r.to_csv(), format!("{CSV_HEADER}\n"));
    }

    #[test]
    fn bench_is_deterministic() {
        let (model, params) = tiny();
        let a = run_recall_bench(&model, &params, 3, 2, 16, 5).unwrap();
        assert_eq!(a, run_recall_bench(&model, &params, 3, 2, 16, 5).unwrap());
        assert_eq!(a.items.len(), 6);
        assert!(a.control_exact_match.unwrap() <= 1.0);
    }
}
