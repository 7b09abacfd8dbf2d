//! Stable JSON serialization: keys sorted, floats in shortest round-trip form.

use serde::Serialize;
use sha2::{Digest, Sha256};

/// Serializes to text first so `f32` fields keep their shortest form, then
/// re-reads into `serde_json::Value`, whose maps are key-ordered.
fn sorted_value<T: Serialize + ?Sized>(value: &T) -> serde_json::Result<serde_json::Value> {
    serde_json::from_str(&serde_json::to_string(value)?)
}

pub fn to_canonical_string<T: Serialize + ?Sized>(value: &T) -> serde_json::Result<String> {
    serde_json::to_string(&sorted_value(value)?)
}

pub fn to_canonical_pretty<T: Serialize + ?Sized>(value: &T) -> serde_json::Result<String> {
    serde_json::to_string_pretty(&sorted_value(value)?)
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[derive(Serialize)]
    struct Unordered {
        zeta: u8,
        alpha: f32,
    }

    #[test]
    fn keys_are_sorted() {
        let s = to_canonical_string(&Unordered { zeta: 1, alpha: 0.1 }).unwrap();
        assert_eq!(s, r#"{"alpha":0.1,"zeta":1}"#);
    }
}
