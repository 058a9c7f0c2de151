#![no_main]

use denseig::report::{parse_meta_line, read_cloud};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    let _ = parse_meta_line(text.lines().next().unwrap_or(""));
    if let Ok(cloud) = read_cloud(text) {
        assert_eq!(read_cloud(&cloud.to_tsv()).unwrap(), cloud);
    }
});
