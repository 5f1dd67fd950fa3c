#![no_main]
use libfuzzer_sys::fuzz_target;
use ssboost_cli::commands::{parse_manifest, scene_file_name};

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(m) = parse_manifest(text) {
        assert_eq!(m.files.len(), m.count);
        for (i, f) in m.files.iter().enumerate() {
            assert_eq!(f.name, scene_file_name(i));
        }
    }
});
