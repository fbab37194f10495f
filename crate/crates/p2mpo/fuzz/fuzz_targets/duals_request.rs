#![no_main]

use libfuzzer_sys::fuzz_target;

// Parses the request and, when valid, runs the dual solver on it, so the
// numeric path is exercised against adversarial probabilities and radii.
fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        let _ = p2mpo::duals::eval_request_json(text);
    }
});
