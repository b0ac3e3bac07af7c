use crate::model::{MlpActivation, ModelConfig, ModelParams};

pub(crate) fn rel_close(a: f64, b: f64, rel: f64, abs: f64) -> bool {
    (a - b).abs() <= rel * a.abs().max(b.abs()) + abs
}

/// Small randomized model: `n_layers` layers, `n_heads` heads of width 4.
pub(crate) fn seeded_params(n_layers: usize, n_heads: usize, d_model: usize, seed: u64) -> ModelParams {
    let cfg = ModelConfig {
        n_layers,
        n_heads,
        d_model,
        d_head: d_model / n_heads,
        d_mlp: 4 * d_model,
        vocab_size: 11,
        context_len: 8,
        ln_epsilon: 1e-5,
        activation: MlpActivation::Relu,
        tied_embeddings: false,
    };
    ModelParams::randomized(&cfg, seed).unwrap()
}
