#![allow(dead_code)]

pub mod checks;
pub mod radiomics_reference;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Result of one acceptance criterion.
pub struct Outcome {
    pub pass: bool,
    pub detail: String,
}

impl Outcome {
    pub fn new(pass: bool, detail: impl Into<String>) -> Self {
        Outcome { pass, detail: detail.into() }
    }

    /// Panics with the detail when the check failed; for `#[test]` use.
    pub fn assert(self) {
        assert!(self.pass, "{}", self.detail);
    }
}
