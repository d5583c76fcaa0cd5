//! Deterministic RNG streams.
//!
//! Every stochastic component draws from a [`ChaCha12Rng`] seeded from a run
//! seed plus a stream id, so independent stages (path sampling, environment
//! resets, SAC batches, per-sample generation) stay decoupled: consuming more
//! randomness in one stream never shifts another.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha12Rng;

/// Well-known stream ids. Keeping them in one place avoids accidental reuse.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    EnvReset = 1,
    Policy = 2,
    CfmTrain = 3,
    ControlTrain = 4,
    GuidanceTrain = 5,
    Sampler = 6,
    SacBatch = 7,
    Eval = 8,
    Init = 9,
    Oracle = 10,
}

/// A root seed from which all per-stream RNGs are derived.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct RunSeed(pub u64);

impl RunSeed {
    /// RNG for a well-known stage.
    pub fn stream(&self, stream: Stream) -> ChaCha12Rng {
        self.substream(stream as u64, 0)
    }

    /// RNG for a stage plus an index (worker id, sample id, round id).
    pub fn substream(&self, stream: u64, index: u64) -> ChaCha12Rng {
        let mut rng = ChaCha12Rng::seed_from_u64(self.0 ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15));
        rng.set_stream(index.into());
        rng
    }
}
