#![no_main]
use libfuzzer_sys::fuzz_target;
use ssboost::io::{label_map_to_text, parse_label_map};

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok((w, h, labels)) = parse_label_map(text) {
        assert_eq!(labels.len(), w * h);
        assert_eq!(parse_label_map(&label_map_to_text(w, &labels)).unwrap(), (w, h, labels));
    }
});
