//! Named sub-seeds derived from one run seed.

use sha2::{Digest, Sha256};

pub const SPLIT: &str = "split";
pub const INIT: &str = "init";
pub const DROPOUT: &str = "dropout";
pub const SHUFFLE: &str = "shuffle";
pub const SIMULATOR: &str = "simulator";

/// First eight bytes of `sha256(seed ‖ name)`. Distinct names give
/// independent streams; the same pair always gives the same seed.
pub fn sub_seed(seed: u64, name: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(name.as_bytes());
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("digest has 32 bytes"))
}
