#![no_main]

use adapt_core::llm::{parse_llm_response, plan_from_response};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let raw = String::from_utf8_lossy(data);
    if let Ok(resp) = parse_llm_response(&raw) {
        assert_eq!(
            resp.num_rare_concepts,
            adapt_core::llm::count_break_clauses(&resp.final_sequence)
        );
    }
    let _ = plan_from_response("A hairy frog and a horned lion", &raw);
});
