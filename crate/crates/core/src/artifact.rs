//! Hashing helpers shared by every file the pipeline writes.

use serde::Serialize;
use sha2::{Digest, Sha256};

/// Bumped whenever an on-disk format changes.
pub const ARTIFACT_VERSION: u32 = 1;

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// 16 hex characters of the SHA-256 of a value's compact JSON encoding.
pub fn json_hash<T: Serialize>(value: &T) -> String {
    let text = serde_json::to_vec(value).expect("serializable value");
    sha256_hex(&text)[..16].to_string()
}
