#![no_main]

use denseig::ReferenceEncoder;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(enc) = ReferenceEncoder::from_bytes(data) {
        assert_eq!(enc.to_bytes(), data);
    }
});
