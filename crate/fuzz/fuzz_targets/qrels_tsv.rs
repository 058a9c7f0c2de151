#![no_main]

use denseig::corpus::parse_qrels;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(qrels) = parse_qrels(data) {
        let mut buf = Vec::new();
        qrels.write_tsv(&mut buf).unwrap();
        let again = parse_qrels(buf.as_slice()).unwrap();
        assert_eq!(again.iter().collect::<Vec<_>>(), qrels.iter().collect::<Vec<_>>());
    }
});
