#![no_main]
use genunc::pipeline::{parse_score_name, SCORE_NAMES};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(parts) = parse_score_name(text) {
        assert!(!parts.is_empty());
        assert!(parts.iter().all(|p| SCORE_NAMES.contains(p)));
    }
});
