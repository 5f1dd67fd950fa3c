#![no_main]
use libfuzzer_sys::fuzz_target;
use ssboost::Budget;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(Budget::Limited(b)) = text.parse::<Budget>() {
        assert!(b.is_finite() && b >= 0.0);
    }
});
