#![no_main]
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(table) = genunc::io::read_embeddings_csv(data) {
        assert!(table.values().flatten().all(|v| v.is_finite()));
    }
});
