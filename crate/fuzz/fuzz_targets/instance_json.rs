#![no_main]
use libfuzzer_sys::fuzz_target;
use ssboost::io::{instance_from_json, instance_to_json};

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(inst) = instance_from_json(text) {
        // anything accepted must survive a round trip
        let again = instance_from_json(&instance_to_json(&inst)).expect("round trip");
        assert_eq!(again.num_pixels(), inst.num_pixels());
    }
});
