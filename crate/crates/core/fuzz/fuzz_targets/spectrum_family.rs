#![no_main]

use ffnspec::synth::{generate_spectrum, SpectrumFamily, SpectrumSpec};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok(family) = text.parse::<SpectrumFamily>() {
            let d = match &family {
                SpectrumFamily::Explicit(v) => v.len(),
                _ => 16,
            };
            if let Ok(s) = generate_spectrum(&SpectrumSpec::new(family, d)) {
                assert!(s.lambdas().windows(2).all(|w| w[0] >= w[1]));
            }
        }
    }
});
