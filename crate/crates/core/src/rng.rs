use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Name recorded in output metadata.
pub const RNG_NAME: &str = "ChaCha8Rng(seed_from_u64(master_seed), stream=trajectory_index)";

/// Independent generator for trajectory `index` of an ensemble.
pub fn trajectory_rng(master_seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(master_seed);
    rng.set_stream(index);
    rng
}
