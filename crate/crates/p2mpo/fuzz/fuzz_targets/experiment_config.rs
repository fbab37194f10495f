#![no_main]

use libfuzzer_sys::fuzz_target;
use p2mpo::experiment::ExperimentConfig;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok(cfg) = serde_json::from_str::<ExperimentConfig>(text) {
            let _ = cfg.validate();
        }
    }
});
