#![no_main]

use ffnspec::report::parse_loss_csv;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok(loss) = parse_loss_csv(text) {
            assert!(loss.values().all(|v| v.is_finite()));
        }
    }
});
