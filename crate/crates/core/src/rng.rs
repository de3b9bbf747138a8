use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Generator for one named purpose under a seed. Distinct streams under the
/// same seed are independent, so adding a consumer never shifts another's draws.
pub fn stream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

pub(crate) mod streams {
    pub const SYNTHETIC: u64 = 1;
    pub const GRAPH: u64 = 2;
    pub const VIEWS: u64 = 3;
    pub const ADAPTER_INIT: u64 = 4;
    pub const KT_INIT: u64 = 5;
    pub const KT_SHUFFLE: u64 = 6;
    pub const REC_INIT: u64 = 7;
    pub const SSL_MASK: u64 = 8;
    pub const FINETUNE_SHUFFLE: u64 = 9;
    pub const KMEANS: u64 = 10;
    pub const SSL_SHUFFLE: u64 = 11;
    pub const RANDOM_BASELINE: u64 = 12;
}
