use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

/// Position of an epoch sampler; enough to resume it exactly.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SamplerState {
    pub epoch: u64,
    pub pos: usize,
}

/// Draws fixed-size batches without replacement, reshuffling every epoch.
///
/// The order of an epoch depends only on `(seed, tag, epoch)`. A batch never
/// straddles epochs: the tail that does not fill a batch is skipped.
#[derive(Clone, Debug)]
pub struct EpochSampler {
    seed: u64,
    tag: String,
    len: usize,
    state: SamplerState,
    order: Vec<usize>,
}

impl EpochSampler {
    pub fn new(seed: u64, tag: &str, len: usize) -> Self {
        Self::resume(seed, tag, len, SamplerState::default())
    }

    pub fn resume(seed: u64, tag: &str, len: usize, state: SamplerState) -> Self {
        let mut s = EpochSampler {
            seed,
            tag: tag.to_string(),
            len,
            state,
            order: Vec::new(),
        };
        s.order = s.epoch_order(state.epoch);
        s
    }

    fn epoch_order(&self, epoch: u64) -> Vec<usize> {
        let digest = Sha256::new()
            .chain_update(self.seed.to_le_bytes())
            .chain_update(self.tag.as_bytes())
            .chain_update(epoch.to_le_bytes())
            .finalize();
        let mut key = [0u8; 32];
        key.copy_from_slice(&digest);
        let mut order: Vec<usize> = (0..self.len).collect();
        order.shuffle(&mut ChaCha8Rng::from_seed(key));
        order
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn state(&self) -> SamplerState {
        self.state
    }

    /// Next `min(size, len)` indices.
    pub fn next_batch(&mut self, size: usize) -> Vec<usize> {
        let size = size.min(self.len);
        if size == 0 {
            return Vec::new();
        }
        if self.state.pos + size > self.len {
            self.state = SamplerState {
                epoch: self.state.epoch + 1,
                pos: 0,
            };
            self.order = self.epoch_order(self.state.epoch);
        }
        let batch = self.order[self.state.pos..self.state.pos + size].to_vec();
        self.state.pos += size;
        batch
    }
}
