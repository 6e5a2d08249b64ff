#![no_main]

use ffnspec::ingest::{decode_dump, encode_dump, DumpHeader};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let _ = DumpHeader::decode(data);
    if let Ok(batch) = decode_dump(data) {
        let bytes = encode_dump(&batch).expect("decoded batch re-encodes");
        assert_eq!(decode_dump(&bytes).expect("re-encoded dump decodes"), batch);
    }
});
