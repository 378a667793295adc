#![no_main]
use libfuzzer_sys::fuzz_target;
use rlvr_core::rewards::RewardConfig;
use rlvr_core::trainer::warmstart::WarmStartConfig;
use rlvr_core::trainer::TrainConfig;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    if let Ok(c) = RewardConfig::from_toml(text) {
        assert_eq!(RewardConfig::from_toml(&c.to_toml()).expect("round trip"), c);
    }
    if let Ok(c) = TrainConfig::from_toml(text) {
        assert_eq!(TrainConfig::from_toml(&c.to_toml()).expect("round trip"), c);
    }
    let _ = WarmStartConfig::from_toml(text);
});
