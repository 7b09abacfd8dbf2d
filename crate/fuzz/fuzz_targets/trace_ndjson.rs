#![no_main]

use adapt_core::trace::Trace;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    if let Ok(trace) = Trace::parse_ndjson(text) {
        let _ = trace.validate();
        let _ = trace.stop_points();
        let out = trace.to_ndjson().unwrap();
        assert_eq!(Trace::parse_ndjson(&out).unwrap(), trace);
    }
});
