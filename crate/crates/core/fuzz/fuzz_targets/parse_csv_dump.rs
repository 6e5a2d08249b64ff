#![no_main]

use ffnspec::ingest::{encode_dump, parse_csv_dump};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok(batch) = parse_csv_dump(text) {
            assert_eq!(batch.data().len(), batch.n_rows() * batch.dim());
            assert!(batch.data().iter().all(|v| v.is_finite()));
            let _ = encode_dump(&batch);
        }
    }
});
