#![no_main]
use std::sync::OnceLock;

use libfuzzer_sys::fuzz_target;
use rlvr_core::policy::Vocabulary;

fn vocab() -> &'static Vocabulary {
    static V: OnceLock<Vocabulary> = OnceLock::new();
    V.get_or_init(Vocabulary::standard)
}

fuzz_target!(|data: &[u8]| {
    let text = String::from_utf8_lossy(data);
    if let Ok(ids) = vocab().encode(&text) {
        // decode drops padding, BOS and EOS
        let s = vocab().specials();
        let kept: Vec<usize> = ids.into_iter().filter(|&i| i != s.pad && i != s.bos && i != s.eos).collect();
        assert_eq!(vocab().encode(&vocab().decode(&kept)).expect("decoded text encodes"), kept);
    }
    let _ = vocab().prompt_tokens(&text);
});
