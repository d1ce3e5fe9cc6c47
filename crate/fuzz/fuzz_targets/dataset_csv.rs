#![no_main]
use genunc::dataset::Dataset;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(set) = Dataset::read_csv(data) {
        let mut out = Vec::new();
        set.write_csv(&mut out).expect("parsed dataset writes");
        let again = Dataset::read_csv(out.as_slice()).expect("written dataset reparses");
        assert_eq!(again.len(), set.len());
        assert_eq!(again.labels, set.labels);
    }
});
