#![no_main]

use hybridgen::constraints::validate_plan;
use hybridgen::gateway::parse_constraint_plan;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    let p = parse_constraint_plan(text);
    assert_eq!(p.valid, p.violations.is_empty());
    if let Some(plan) = p.plan {
        let _ = validate_plan(&plan);
    }
});
