#![no_main]
use genunc::posterior::LaplaceState;
use genunc_fuzz::sealed;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let _ = LaplaceState::decode(data);
    let _ = LaplaceState::decode(&sealed(data));
});
