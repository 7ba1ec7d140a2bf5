//! Segment-level memory: per-layer caches of the previous segment's block inputs.
//!
//! Caches are replaced (never appended) on every update and hold at most `capacity`
//! frames. They are stored detached; the stack feeds them through a stop-gradient.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{NamedTensors, Tensor};

/// Default cached length for encoder stacks, in phoneme frames.
pub const ENCODER_MEMORY_LEN: usize = 128;
/// Default cached length for decoder stacks, in length-regulated frames.
pub const DECODER_MEMORY_LEN: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MemoryConfig {
    pub num_layers: usize,
    pub capacity: usize,
    pub hidden: usize,
}

impl MemoryConfig {
    pub fn encoder(num_layers: usize, hidden: usize) -> Self {
        MemoryConfig {
            num_layers,
            capacity: ENCODER_MEMORY_LEN,
            hidden,
        }
    }

    pub fn decoder(num_layers: usize, hidden: usize) -> Self {
        MemoryConfig {
            num_layers,
            capacity: DECODER_MEMORY_LEN,
            hidden,
        }
    }
}

impl Default for MemoryConfig {
    fn default() -> Self {
        Self::encoder(4, 384)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SegmentMemory {
    config: MemoryConfig,
    layers: Vec<Tensor>,
    segment_index: usize,
}

impl SegmentMemory {
    /// Empty `[0 × hidden]` caches for every layer.
    pub fn new(config: MemoryConfig) -> Self {
        SegmentMemory {
            config,
            layers: vec![Tensor::zeros(&[0, config.hidden]); config.num_layers],
            segment_index: 0,
        }
    }

    pub fn config(&self) -> MemoryConfig {
        self.config
    }

    pub fn capacity(&self) -> usize {
        self.config.capacity
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn segment_index(&self) -> usize {
        self.segment_index
    }

    pub fn layer(&self, n: usize) -> Option<&Tensor> {
        self.layers.get(n)
    }

    pub fn layers(&self) -> &[Tensor] {
        &self.layers
    }

    /// Cached frames per layer (identical across layers).
    pub fn cached_len(&self) -> usize {
        self.layers.first().map_or(0, Tensor::rows)
    }

    pub fn is_empty(&self) -> bool {
        self.cached_len() == 0
    }

    /// Replaces each cache with the last `min(capacity, L)` rows of the matching layer state.
    pub fn update(&self, layer_states: &[Tensor]) -> Result<Self> {
        if layer_states.len() != self.layers.len() {
            return Err(Error::config(format!(
                "memory has {} layers but {} layer states were given",
                self.layers.len(),
                layer_states.len()
            )));
        }
        let layers = layer_states
            .iter()
            .enumerate()
            .map(|(n, state)| {
                if state.rank() != 2 || state.cols() != self.config.hidden {
                    return Err(Error::config(format!(
                        "layer {n} state has shape {:?}, memory width is {}",
                        state.shape(),
                        self.config.hidden
                    )));
                }
                let l = state.rows();
                let keep = l.min(self.config.capacity);
                Ok(state.slice_rows(l - keep..l)?.detached())
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(SegmentMemory {
            config: self.config,
            layers,
            segment_index: self.segment_index + 1,
        })
    }

    pub fn reset(&self) -> Self {
        Self::new(self.config)
    }

    /// Dumps caches as `{prefix}.layer{n}` entries.
    pub fn to_named(&self, prefix: &str) -> NamedTensors {
        self.layers
            .iter()
            .enumerate()
            .map(|(n, t)| (format!("{prefix}.layer{n}"), t.clone()))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn states(n: usize, l: usize, d: usize, seed: u64) -> Vec<Tensor> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| Tensor::randn(&[l, d], &mut rng)).collect()
    }

    #[test]
    fn default_encoder_memory_is_empty_with_capacity_128() {
        let m = SegmentMemory::new(MemoryConfig::default());
        assert_eq!(m.capacity(), 128);
        assert_eq!(m.num_layers(), 4);
        assert!(m.is_empty());
        assert_eq!(m.segment_index(), 0);
        assert_eq!(SegmentMemory::new(MemoryConfig::decoder(4, 8)).capacity(), 64);
    }

    #[test]
    fn fresh_memories_are_independent_values() {
        let cfg = MemoryConfig::encoder(2, 4);
        let a = SegmentMemory::new(cfg);
        let b = a.update(&states(2, 3, 4, 1)).unwrap();
        assert!(a.is_empty());
        assert_eq!(b.cached_len(), 3);
        assert_eq!(SegmentMemory::new(cfg), a);
    }

    #[test]
    fn long_segment_keeps_tail() {
        let m = SegmentMemory::new(MemoryConfig::encoder(1, 2));
        let state = Tensor::new(vec![200, 2], (0..400).map(|v| v as f64).collect()).unwrap();
        let u = m.update(&[state.clone()]).unwrap();
        assert_eq!(u.layer(0).unwrap(), &state.slice_rows(72..200).unwrap());
        assert_eq!(u.segment_index(), 1);
    }

    #[test]
    fn short_segment_is_not_padded() {
        let m = SegmentMemory::new(MemoryConfig::encoder(2, 3));
        let s = states(2, 50, 3, 2);
        let u = m.update(&s).unwrap();
        assert_eq!(u.layer(1).unwrap(), &s[1]);
    }

    #[test]
    fn update_replaces_previous_content() {
        let m = SegmentMemory::new(MemoryConfig { num_layers: 2, capacity: 5, hidden: 3 });
        let first = m.update(&states(2, 7, 3, 3)).unwrap();
        let second_states = states(2, 4, 3, 4);
        let second = first.update(&second_states).unwrap();
        assert_eq!(second.layers(), second_states.as_slice());
        assert_eq!(second.layers(), m.update(&second_states).unwrap().layers());
        assert_eq!(second.segment_index(), 2);
    }

    #[test]
    fn caches_are_detached_copies() {
        let m = SegmentMemory::new(MemoryConfig::encoder(1, 2));
        let mut s = Tensor::ones(&[3, 2]).with_requires_grad(true);
        let u = m.update(std::slice::from_ref(&s)).unwrap();
        s.data_mut()[0] = 99.0;
        assert_eq!(u.layer(0).unwrap(), &Tensor::ones(&[3, 2]));
        assert!(!u.layer(0).unwrap().requires_grad());
    }

    #[test]
    fn wrong_layer_count_or_width_is_config_error() {
        let m = SegmentMemory::new(MemoryConfig::encoder(2, 3));
        assert!(matches!(m.update(&states(3, 4, 3, 5)), Err(Error::Config(_))));
        assert!(matches!(m.update(&states(2, 4, 5, 5)), Err(Error::Config(_))));
    }

    #[test]
    fn reset_empties_caches() {
        let cfg = MemoryConfig::encoder(2, 3);
        let fresh = SegmentMemory::new(cfg);
        assert_eq!(fresh.reset(), fresh);
        let used = fresh.update(&states(2, 9, 3, 6)).unwrap();
        assert_eq!(used.reset(), fresh);
    }

    #[test]
    fn named_dump() {
        let m = SegmentMemory::new(MemoryConfig::encoder(2, 3)).update(&states(2, 2, 3, 7)).unwrap();
        let named = m.to_named("enc.mem");
        assert_eq!(named.names().collect::<Vec<_>>(), ["enc.mem.layer0", "enc.mem.layer1"]);
    }

    proptest::proptest! {
        #[test]
        fn cached_length_is_min_of_capacity_and_segment(cap in 0usize..40, l in 1usize..60) {
            let m = SegmentMemory::new(MemoryConfig { num_layers: 2, capacity: cap, hidden: 2 });
            let u = m.update(&states(2, l, 2, 8)).unwrap();
            proptest::prop_assert!(u.layers().iter().all(|t| t.rows() == cap.min(l)));
        }
    }
}
