#![no_main]
use genunc::io::decode_records;
use genunc_fuzz::sealed;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let _ = decode_records(data);
    let _ = decode_records(&sealed(data));
});
