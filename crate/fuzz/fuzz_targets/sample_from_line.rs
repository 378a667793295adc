#![no_main]
use libfuzzer_sys::fuzz_target;
use rlvr_core::taskgen::io::{sample_from_line, sample_to_line};

fuzz_target!(|data: &[u8]| {
    let Ok(line) = std::str::from_utf8(data) else {
        return;
    };
    if let Ok(s) = sample_from_line(line) {
        let again = sample_from_line(&sample_to_line(&s)).expect("re-encoded record parses");
        assert_eq!(again, s);
    }
});
