//! First line is the prompt sequence, the rest is the context.

#![no_main]

use adapt_core::concept::{parse_prompt_sequence, render_prompt_sequence};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    let (seq, ctx) = text.split_once('\n').unwrap_or((text, ""));
    if let Ok(plan) = parse_prompt_sequence(seq, ctx) {
        let (seq2, ctx2) = render_prompt_sequence(&plan);
        let again = parse_prompt_sequence(&seq2, &ctx2).expect("rendered sequence parses");
        assert_eq!(again.pairs(), plan.pairs());
    }
});
