use super::{InjectionConfig, ModelConfig};

/// Trainable generator size and emitted adapter size, in scalars.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParameterCounts {
    pub generator: u64,
    pub adapter: u64,
}

/// Sizes for a generator with intermediate width `intermediate_dim` and
/// emission rank `rank`, attached to every block at each injection target.
pub fn count_parameters(
    model: &ModelConfig,
    injection: &InjectionConfig,
    intermediate_dim: usize,
    rank: usize,
) -> ParameterCounts {
    let (h, dr, r) = (model.hidden_dim as u64, intermediate_dim as u64, rank as u64);
    let mut counts = ParameterCounts {
        generator: 0,
        adapter: 0,
    };
    for &target in injection.targets() {
        let (d_in, d_out) = target.dims(model.hidden_dim, model.ffn_dim);
        let (d_in, d_out) = (d_in as u64, d_out as u64);
        let layers = model.num_layers as u64;
        counts.generator += layers * (d_out * dr + dr * h + h * dr + dr * d_in);
        counts.adapter += layers * r * (d_out + d_in);
    }
    counts
}
