//! Deterministic inputs shared by the benchmarks.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sepcount_core::counter::SyntheticEmbeddings;
use sepcount_core::data::{generate_example, DatasetConfig};
use sepcount_core::{Split, Tensor, Waveform};

/// `rows × 20` embeddings along `count` directions.
pub fn embeddings(rows: usize, count: usize) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    SyntheticEmbeddings { rows, ..SyntheticEmbeddings::default() }.sample(count, &mut rng)
}

/// A half-second two-speaker toy mixture.
pub fn mixture() -> Waveform {
    generate_example(&DatasetConfig::toy(), Split::Test, 2, 0).expect("toy example").mixture
}
