#![no_main]

use std::sync::OnceLock;

use denseig::encoder::{serve_request, ReferenceConfig};
use denseig::{ReferenceEncoder, Vocabulary};
use libfuzzer_sys::fuzz_target;

fn encoder() -> &'static ReferenceEncoder {
    static ENC: OnceLock<ReferenceEncoder> = OnceLock::new();
    ENC.get_or_init(|| {
        let vocab = Vocabulary::from_texts(["gold is a hedge against inflation"]);
        let cfg = ReferenceConfig {
            dim: 4,
            max_seq_len: 16,
            seed: 1,
        };
        ReferenceEncoder::new(vocab, cfg).unwrap()
    })
}

fuzz_target!(|data: &[u8]| {
    if let Ok(req) = serde_json::from_slice::<serde_json::Value>(data) {
        let reply = serve_request(encoder(), &req);
        assert!(reply.is_object());
    }
});
