#![no_main]
use genunc::pipeline::ExperimentConfig;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(cfg) = ExperimentConfig::parse(text) {
        let _ = cfg.validate();
        // Whatever parses must survive a round trip through its own output.
        ExperimentConfig::parse(&cfg.to_toml()).expect("serialized config reparses");
    }
});
