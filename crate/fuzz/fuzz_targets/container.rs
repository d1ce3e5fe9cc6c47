#![no_main]
use genunc::io::container::Container;
use genunc_fuzz::sealed;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let _ = Container::decode(data);
    if let Ok(c) = Container::decode(&sealed(data)) {
        assert_eq!(Container::decode(&c.encode()).expect("re-encoded container decodes"), c);
    }
});
