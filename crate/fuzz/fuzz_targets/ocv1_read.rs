#![no_main]
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    // Grid and mask readers must reject arbitrary bytes without panicking
    // or allocating more than the input justifies.
    let _ = occnl::ocv1::read_grid_from_slice(data);
    let _ = occnl::ocv1::read_mask_from_slice(data);
});
