#![no_main]

use ffnspec::report::parse_metrics_csv;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok(table) = parse_metrics_csv(text) {
            assert!(table
                .values()
                .flat_map(|m| m.values())
                .all(|v| v.is_finite()));
        }
    }
});
