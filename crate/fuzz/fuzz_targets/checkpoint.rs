#![no_main]
use genunc::diffusion::Checkpoint;
use genunc_fuzz::sealed;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let _ = Checkpoint::decode(data);
    if let Ok(ck) = Checkpoint::decode(&sealed(data)) {
        Checkpoint::decode(&ck.encode()).expect("re-encoded checkpoint decodes");
    }
});
