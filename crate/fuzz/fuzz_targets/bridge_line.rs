//! Each input line is one request to a fresh session.

#![no_main]

use adapt_core::bridge::Bridge;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let text = String::from_utf8_lossy(data);
    // File-backed vectors would let the fuzzer read arbitrary paths.
    if text.contains("\"path\"") {
        return;
    }
    let mut bridge = Bridge::new();
    for line in text.lines() {
        if let Some(reply) = bridge.handle_line(line) {
            let v: serde_json::Value = serde_json::from_str(&reply).unwrap();
            assert!(v.get("id").is_some());
        }
    }
});
