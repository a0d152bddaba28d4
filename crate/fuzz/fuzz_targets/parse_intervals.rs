#![no_main]

use hybridgen::gateway::{parse_intervals, render_intervals};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    let p = parse_intervals(text);
    assert_eq!(p.valid, p.violations.is_empty());
    if p.valid {
        // whatever we accept must survive a render/parse cycle
        assert_eq!(parse_intervals(&render_intervals(&p.intervals)).intervals, p.intervals);
    }
});
