//! Shared fixtures for the benchmarks.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use vqprompt::{BackboneConfig, FrozenBackbone, PromptPool, Tensor};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// A frozen backbone with the default shape.
pub fn backbone() -> FrozenBackbone {
    let mut b = FrozenBackbone::init(BackboneConfig::default(), &mut rng(0)).expect("default config is valid");
    b.freeze();
    b
}

pub fn pool(size: usize, prompt_len: usize, dim: usize) -> PromptPool {
    PromptPool::init(size, prompt_len, dim, &mut rng(1)).expect("even prompt length")
}

/// `[batch, seq, dim]` token batch for the default backbone.
pub fn tokens(batch: usize) -> Tensor {
    let cfg = BackboneConfig::default();
    Tensor::uniform(vec![batch, cfg.content_len(), cfg.token_dim], 1.0, &mut rng(2))
}
