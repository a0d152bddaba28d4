#![no_main]

use hybridgen::keypoints::ResponseMap;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(map) = ResponseMap::from_json(text) {
        assert_eq!(ResponseMap::from_json(&map.to_json()).unwrap(), map);
    }
});
