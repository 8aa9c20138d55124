#![no_main]

use libfuzzer_sys::fuzz_target;
use tspo_core::datapipe::{decode_dataset, encode_dataset};

fuzz_target!(|data: &[u8]| {
    // Anything that decodes must re-encode to the same bytes.
    if let Ok(ds) = decode_dataset(data) {
        assert_eq!(encode_dataset(&ds).expect("decoded data encodes"), data);
    }
});
