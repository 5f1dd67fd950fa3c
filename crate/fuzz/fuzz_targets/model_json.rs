#![no_main]
use libfuzzer_sys::fuzz_target;
use ssboost::io::{model_from_json, model_to_json};

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(model) = model_from_json(text) {
        let again = model_from_json(&model_to_json(&model)).expect("round trip");
        assert_eq!(again.stages.len(), model.stages.len());
    }
});
