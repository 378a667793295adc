#![no_main]
use libfuzzer_sys::fuzz_target;
use rlvr_core::rewards::verify_format;

fuzz_target!(|data: &[u8]| {
    let text = String::from_utf8_lossy(data);
    assert!(verify_format(&text) <= 1);
});
