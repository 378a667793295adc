#![no_main]
use libfuzzer_sys::fuzz_target;
use rlvr_core::taskgen::Scene;

fuzz_target!(|data: &[u8]| {
    if data.len() < 2 {
        return;
    }
    let (h, w) = (data[0] as usize % 65, data[1] as usize % 65);
    let rle = String::from_utf8_lossy(&data[2..]);
    if let Ok(scene) = Scene::from_rle(h, w, &rle) {
        assert_eq!(Scene::from_rle(h, w, &scene.to_rle()).expect("round trip"), scene);
    }
});
