#![no_main]
use libfuzzer_sys::fuzz_target;
use rlvr_core::policy::Checkpoint;

fuzz_target!(|data: &[u8]| {
    if let Ok(c) = Checkpoint::from_bytes(data, "fuzz") {
        let _ = c.policy();
    }
});
