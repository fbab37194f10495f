#![no_main]

use libfuzzer_sys::fuzz_target;

// Model files come from users; parsing plus invariant validation must never
// panic or blow up on arbitrary bytes.
fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        let _ = p2mpo::model::parse_model(text);
    }
});
