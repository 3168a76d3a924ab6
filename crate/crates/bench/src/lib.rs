//! Fixtures for the criterion benchmarks.

use gkm_core::{setup, ControllerState, LkhConfig, RekeyPolicy, UserId};
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

pub fn rng(seed: u64) -> ChaCha20Rng {
    ChaCha20Rng::seed_from_u64(seed)
}

/// A controller over `n` members named `m0..`, ledger off.
pub fn controller(policy: RekeyPolicy, degree: usize, n: usize, rng: &mut ChaCha20Rng) -> ControllerState {
    let users: Vec<UserId> = (0..n).map(|i| UserId::new(format!("m{i}"))).collect();
    let config = LkhConfig {
        degree,
        audit: false,
        ..LkhConfig::with_policy(policy)
    };
    setup(&users, config, rng).expect("setup").0
}
