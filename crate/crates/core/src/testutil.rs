use alloc::vec;
use alloc::vec::Vec;

use crate::model::{ModelConfig, BOS, EOS};
use crate::rng::Rng;

pub fn tiny_config() -> ModelConfig {
    ModelConfig {
        vocab_size: 20,
        max_seq_len: 10,
        d_model: 8,
        n_layers: 3,
        n_heads: 2,
        d_image_in: 6,
        logit_scale: 20.0,
    }
}

pub fn random_tokens(rng: &mut Rng, n: usize, vocab: u32) -> Vec<u32> {
    let mut t = vec![BOS];
    for _ in 0..n {
        t.push(rand::Rng::random_range(rng, 4..vocab));
    }
    t.push(EOS);
    t
}
