#![no_main]

use denseig::DenseIndex;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(index) = DenseIndex::from_bytes(data) {
        assert_eq!(index.to_bytes(), data);
        if index.dim() > 0 && !index.is_empty() {
            let q = index.embeddings().row(0).to_owned();
            let _ = index.retrieve(q.view(), 3);
        }
    }
});
