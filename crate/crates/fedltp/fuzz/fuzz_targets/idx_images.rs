#![no_main]

use libfuzzer_sys::fuzz_target;

// Parsing arbitrary bytes as an IDX image file must never panic.
fuzz_target!(|data: &[u8]| {
    let _ = fedltp::data::idx::parse_idx_images(data);
});
