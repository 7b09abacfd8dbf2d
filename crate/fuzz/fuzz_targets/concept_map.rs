#![no_main]

use adapt_core::concept::PromptPlan;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(plan) = serde_json::from_slice::<PromptPlan>(data) {
        let json = serde_json::to_string(&plan).unwrap();
        let back: PromptPlan = serde_json::from_str(&json).expect("written map reloads");
        assert_eq!(back, plan);
    }
});
