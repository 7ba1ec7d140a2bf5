//! Input builders shared by the criterion benchmarks.

use ctxspeech_core::conformer::{ConformerStack, StackConfig};
use ctxspeech_core::{AttentionConfig, AttentionVariant, Result, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Standard-normal `q`, `k`, `v`, each `[l × d]`.
pub fn random_qkv(l: usize, d: usize, seed: u64) -> (Tensor, Tensor, Tensor) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (
        Tensor::randn(&[l, d], &mut rng),
        Tensor::randn(&[l, d], &mut rng),
        Tensor::randn(&[l, d], &mut rng),
    )
}

/// A randomly initialized stack of `blocks` blocks.
pub fn random_stack(variant: AttentionVariant, blocks: usize, heads: usize, head_dim: usize, seed: u64) -> Result<ConformerStack> {
    let attention = AttentionConfig::new(variant, heads, head_dim)?;
    ConformerStack::random(StackConfig::new(blocks, attention), &mut ChaCha8Rng::seed_from_u64(seed))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn builders_are_seeded() {
        assert_eq!(random_qkv(4, 3, 1).0, random_qkv(4, 3, 1).0);
        let s = random_stack(AttentionVariant::Linearized, 2, 2, 4, 0).unwrap();
        assert_eq!(s.blocks.len(), 2);
        assert_eq!(s.hidden(), 8);
    }
}
