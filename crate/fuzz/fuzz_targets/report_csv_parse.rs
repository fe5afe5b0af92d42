#![no_main]
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let _ = occnl::metrics::parse_report_csv_from_slice(data);
});
