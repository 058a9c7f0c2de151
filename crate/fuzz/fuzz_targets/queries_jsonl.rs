#![no_main]

use denseig::corpus::{parse_queries, write_records};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(queries) = parse_queries(data) {
        let mut buf = Vec::new();
        write_records(queries.as_slice(), &mut buf).unwrap();
        assert_eq!(parse_queries(buf.as_slice()).unwrap().as_slice(), queries.as_slice());
    }
});
