#![no_main]

use libfuzzer_sys::fuzz_target;

// Round-trip property: anything that parses must re-render and re-parse to
// the same rows.
fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok(rows) = fedltp::metrics::parse_csv(text) {
            let again = fedltp::metrics::parse_csv(&fedltp::metrics::render_csv(&rows))
                .expect("re-rendered metrics must parse");
            assert_eq!(rows.len(), again.len());
        }
    }
});
