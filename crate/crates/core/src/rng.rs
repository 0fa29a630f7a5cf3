//! Counter-based random streams.
//!
//! Every random draw in a chain comes from a stream keyed by where it is used
//! (seed, replica, iteration, block, particle, purpose), so trajectories do not
//! depend on evaluation order or on how particle work is scheduled.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// What a stream is used for.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Purpose {
    Initialization = 1,
    ProposalNoise = 2,
    Acceptance = 3,
    ScanOrder = 4,
    Data = 5,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct StreamKey {
    pub seed: u64,
    pub replica: u64,
    pub iteration: u64,
    pub block: u64,
    pub particle: u64,
    pub purpose: Purpose,
}

impl StreamKey {
    pub fn new(seed: u64, purpose: Purpose) -> Self {
        Self {
            seed,
            replica: 0,
            iteration: 0,
            block: 0,
            particle: 0,
            purpose,
        }
    }

    pub fn replica(mut self, replica: u64) -> Self {
        self.replica = replica;
        self
    }

    pub fn iteration(mut self, iteration: u64) -> Self {
        self.iteration = iteration;
        self
    }

    pub fn block(mut self, block: u64) -> Self {
        self.block = block;
        self
    }

    pub fn particle(mut self, particle: u64) -> Self {
        self.particle = particle;
        self
    }

    pub fn purpose(mut self, purpose: Purpose) -> Self {
        self.purpose = purpose;
        self
    }

    pub fn rng(&self) -> ChaCha8Rng {
        let words = [
            self.seed,
            self.replica,
            self.iteration,
            self.block,
            self.particle,
            self.purpose as u64,
        ];
        let mut state = 0x243f_6a88_85a3_08d3u64;
        for w in words {
            state = splitmix64(state ^ w);
        }
        let mut seed = [0u8; 32];
        for chunk in seed.chunks_mut(8) {
            state = splitmix64(state);
            chunk.copy_from_slice(&state.to_le_bytes());
        }
        ChaCha8Rng::from_seed(seed)
    }
}

fn splitmix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}
