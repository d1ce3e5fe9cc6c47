#![no_main]
use genunc::metrics::MetricReport;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(report) = MetricReport::parse(text) {
        MetricReport::parse(&report.to_text()).expect("rendered report reparses");
    }
});
