use serde::Serialize;
use sha2::{Digest, Sha256};

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Digest of a value's JSON form (struct field order is fixed by the type).
pub fn json_digest<T: Serialize>(value: &T) -> String {
    sha256_hex(&serde_json::to_vec(value).expect("value serializes"))
}
