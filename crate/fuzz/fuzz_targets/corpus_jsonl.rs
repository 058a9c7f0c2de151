#![no_main]

use denseig::corpus::{parse_corpus, write_records};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(corpus) = parse_corpus(data) {
        let mut buf = Vec::new();
        write_records(corpus.as_slice(), &mut buf).unwrap();
        let again = parse_corpus(buf.as_slice()).unwrap();
        assert_eq!(again.as_slice(), corpus.as_slice());
    }
});
