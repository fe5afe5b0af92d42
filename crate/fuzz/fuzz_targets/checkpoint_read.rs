#![no_main]
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let _ = occnl::learner::read_checkpoint_from_slice(data);
});
