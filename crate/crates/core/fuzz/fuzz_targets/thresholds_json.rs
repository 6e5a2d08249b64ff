#![no_main]

use ffnspec::diagnostics::RegimeThresholds;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok(th) = RegimeThresholds::from_json(text) {
            assert!(th.validate().is_ok());
        }
    }
});
