#![no_main]

use capocr::training::StagePlan;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(plan) = StagePlan::parse(text, "fuzz") {
        assert!(!plan.stages.is_empty());
        plan.model_config().expect("validated plans have a model");
    }
});
