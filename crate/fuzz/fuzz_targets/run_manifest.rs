#![no_main]
use genunc::pipeline::RunManifest;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(m) = RunManifest::parse(text) {
        RunManifest::parse(&m.to_json()).expect("serialized manifest reparses");
    }
});
