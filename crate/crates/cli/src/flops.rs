//! Analytic compute and storage accounting.
//!
//! A multiply-add counts as 2 FLOPs. Every matmul is counted, including the
//! attention score and value products; softmax, norms, activations and the
//! small dense SVD of the sketched state are left out as lower-order terms.

use genadapter::model::{count_parameters, InjectionConfig, ModelConfig};
use serde::Serialize;

/// Dimensions the report is evaluated at.
#[derive(Debug, Clone, PartialEq)]
pub struct CostModel {
    pub model: ModelConfig,
    pub injection: InjectionConfig,
    pub intermediate_dim: usize,
    pub rank: usize,
    pub power_iterations: usize,
    pub chunk_size: usize,
    /// Tokens of the query answered after the context.
    pub query_length: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct ScenarioCost {
    /// One-off cost of turning the context into whatever the scenario keeps.
    pub contextualization_flops: u64,
    pub query_flops: u64,
    /// Floats kept between context and query.
    pub storage_floats: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct FlopsRow {
    pub context_length: usize,
    pub closed_book: ScenarioCost,
    pub full_prompting: ScenarioCost,
    pub adapted: ScenarioCost,
    /// Floats of the resumable streaming state.
    pub state_floats: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FlopsReport {
    pub query_length: usize,
    pub chunk_size: usize,
    pub rows: Vec<FlopsRow>,
}

pub const CSV_HEADER: &str = "context_length,scenario,contextualization_flops,query_flops,storage_floats";

impl FlopsReport {
    pub fn to_csv(&self) -> String {
        let mut out = format!("{CSV_HEADER}\n");
        for row in &self.rows {
            for (name, c) in [
                ("closed_book", row.closed_book),
                ("full_prompting", row.full_prompting),
                ("adapted", row.adapted),
            ] {
                out.push_str(&format!(
                    "{},{name},{},{},{}\n",
                    row.context_length, c.contextualization_flops, c.query_flops, c.storage_floats
                ));
            }
        }
        out
    }
}

impl CostModel {
    /// `n` new tokens through `blocks` blocks with `prior` cached positions
    /// in front of them, optionally through the output head.
    pub fn forward_flops(&self, n: usize, prior: usize, blocks: usize, head: bool) -> u64 {
        let (n, p) = (n as u64, prior as u64);
        let d = self.model.hidden_dim as u64;
        let f = self.model.ffn_dim as u64;
        let projections = 2 * n * d * 4 * d;
        // Query i attends to prior + i + 1 keys, for the scores and the values.
        let attended = n * p + n * (n + 1) / 2;
        let attention = 2 * 2 * d * attended;
        let ffn = 2 * 2 * n * d * f;
        let per_block = projections + attention + ffn;
        let head = if head { 2 * n * d * self.model.vocab_size as u64 } else { 0 };
        blocks as u64 * per_block + head
    }

    fn target_dims(&self) -> Vec<(u64, u64)> {
        self.injection
            .targets()
            .iter()
            .map(|t| {
                let (i, o) = t.dims(self.model.hidden_dim, self.model.ffn_dim);
                (i as u64, o as u64)
            })
            .collect()
    }

    /// Streaming a context of `len` tokens into an adapter and merging it.
    pub fn contextualization_flops(&self, len: usize) -> u64 {
        if len == 0 {
            return 0;
        }
        let layers = self.model.num_layers;
        let (dh, dr, r) = (self.model.hidden_dim as u64, self.intermediate_dim as u64, self.rank as u64);
        let sketch = (r + r.min(8)).min(dr);
        let dims = self.target_dims();
        let mut total = 0u64;
        let mut start = 0;
        while start < len {
            let n = self.chunk_size.min(len - start);
            let nn = n as u64;
            // The last block's output is never tapped.
            total += self.forward_flops(n, 0, layers - 1, false);
            if start > 0 {
                // Unmerged low-rank updates applied while encoding.
                let per_layer: u64 = dims.iter().map(|&(i, o)| 2 * nn * r * (i + o)).sum();
                total += per_layer * (layers as u64 - 1);
            }
            for &(i, o) in &dims {
                let gram = 2 * dr * dh * nn + 2 * dr * nn * dh + 2 * dr * dh * dr;
                let range_finder = 2 * dr * dr * sketch * (2 + 2 * self.power_iterations as u64);
                let emit = 2 * o * dr * r + 2 * r * dr * i;
                total += layers as u64 * (gram + range_finder + emit);
            }
            start += n;
        }
        let merge: u64 = dims.iter().map(|&(i, o)| 2 * o * r * i).sum();
        total + layers as u64 * merge
    }

    pub fn row(&self, context_length: usize) -> FlopsRow {
        let layers = self.model.num_layers;
        let q = self.query_length;
        let closed = self.forward_flops(q, 0, layers, true);
        let counts = count_parameters(&self.model, &self.injection, self.intermediate_dim, self.rank);
        let dr = self.intermediate_dim as u64;
        FlopsRow {
            context_length,
            closed_book: ScenarioCost {
                contextualization_flops: 0,
                query_flops: closed,
                storage_floats: 0,
            },
            full_prompting: ScenarioCost {
                contextualization_flops: 0,
                query_flops: self.forward_flops(context_length + q, 0, layers, true),
                // Keys and values of the context, which prompting must keep.
                storage_floats: 2 * layers as u64 * self.model.hidden_dim as u64 * context_length as u64,
            },
            adapted: ScenarioCost {
                contextualization_flops: self.contextualization_flops(context_length),
                // The merged weights have the base shapes, so a query costs
                // exactly what it costs closed-book.
                query_flops: closed,
                storage_floats: counts.adapter,
            },
            state_floats: (layers * self.injection.targets().len()) as u64 * dr * dr,
        }
    }

    pub fn report(&self, context_lengths: &[usize]) -> FlopsReport {
        FlopsReport {
            query_length: self.query_length,
            chunk_size: self.chunk_size,
            rows: context_lengths.iter().map(|&c| self.row(c)).collect(),
        }
    }
}

/// The 7B-class dimensions used for the parameter and storage accounting.
pub fn large_model() -> (ModelConfig, usize, usize) {
    (
        ModelConfig {
            vocab_size: 32_000,
            num_layers: 32,
            hidden_dim: 4096,
            num_heads: 32,
            ffn_dim: 14_336,
            max_seq_len: 32_768,
        },
        1024,
        128,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy() -> CostModel {
        CostModel {
            model: ModelConfig::default(),
            injection: InjectionConfig::default(),
            intermediate_dim: 32,
            rank: 8,
            power_iterations: 1,
            chunk_size: 64,
            query_length: 32,
        }
    }

    #[test]
    fn single_token_forward_by_hand() {
        let c = CostModel {
            model: ModelConfig {
                vocab_size: 10,
                num_layers: 1,
                hidden_dim: 2,
                num_heads: 1,
                ffn_dim: 3,
                max_seq_len: 8,
            },
            ..toy()
        };
        // 2·2·8 projections + 4·2·1 attention + 4·2·3 ffn + 2·2·10 head.
        assert_eq!(c.forward_flops(1, 0, 1, true), 32 + 8 + 24 + 40);
        assert_eq!(c.forward_flops(1, 3, 1, false), 32 + 32 + 24);
    }

    #[test]
    fn empty_context_costs_nothing_extra() {
        let row = toy().row(0);
        assert_eq!(row.full_prompting.query_flops, row.closed_book.query_flops);
        assert_eq!(row.adapted.contextualization_flops, 0);
        assert_eq!(row.full_prompting.storage_floats, 0);
    }

    #[test]
    fn adapted_queries_stay_flat_while_prompting_grows() {
        let report = toy().report(&[0, 1, 64, 65, 256, 1024, 4096]);
        for w in report.rows.windows(2) {
            assert_eq!(w[1].adapted.query_flops, w[0].adapted.query_flops);
            assert!(w[1].full_prompting.query_flops > w[0].full_prompting.query_flops);
            assert!(w[1].adapted.contextualization_flops > w[0].adapted.contextualization_flops);
        }
        assert!(report.rows.iter().all(|r| r.adapted.query_flops == r.closed_book.query_flops));
        assert!(report.rows.iter().all(|r| r.adapted.storage_floats == 4096));
    }

    #[test]
    fn csv_has_three_rows_per_length() {
        let csv = toy().report(&[0, 8]).to_csv();
        let lines: Vec<_> = csv.lines().collect();
        assert_eq!(lines[0], CSV_HEADER);
        assert_eq!(lines.len(), 7);
        assert!(lines[3].starts_with("0,adapted,0,"));
    }

    #[test]
    fn large_model_storage() {
        let (model, dr, r) = large_model();
        let c = CostModel {
            model,
            intermediate_dim: dr,
            rank: r,
            ..toy()
        };
        assert_eq!(c.row(1024).adapted.storage_floats, 33_554_432);
    }
}
