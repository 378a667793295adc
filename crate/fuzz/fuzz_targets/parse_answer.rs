#![no_main]
use libfuzzer_sys::fuzz_target;
use rlvr_core::rewards::parse_answer;

fuzz_target!(|data: &[u8]| {
    let text = String::from_utf8_lossy(data);
    let parsed = parse_answer(&text);
    if let Some(b) = parsed.bbox {
        let [x0, y0, x1, y1] = b.coords();
        assert!(x0 <= x1 && y0 <= y1);
    }
});
