#![no_main]

use hybridgen::demos::Dataset;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(ds) = Dataset::from_json(text) {
        let _ = ds.validate();
        assert_eq!(Dataset::from_json(&ds.to_json()).unwrap(), ds);
    }
});
