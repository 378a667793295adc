#![no_main]
use std::sync::OnceLock;

use libfuzzer_sys::fuzz_target;
use rlvr_core::rewards::{score, RewardConfig};
use rlvr_core::taskgen::{render_pool, Sample};

fn samples() -> &'static [Sample] {
    static POOL: OnceLock<Vec<Sample>> = OnceLock::new();
    POOL.get_or_init(|| render_pool(3, 0).expect("pool renders"))
}

fuzz_target!(|data: &[u8]| {
    let Some((&pick, rest)) = data.split_first() else {
        return;
    };
    let sample = &samples()[pick as usize % 3];
    let cfg = RewardConfig::default();
    let r = score(sample, &String::from_utf8_lossy(rest), &cfg);
    assert!(r.total.is_finite());
    assert!((0.0..=cfg.max_total()).contains(&r.total));
});
