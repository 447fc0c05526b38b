#![no_main]

use bellman_lab::cli::ExperimentConfig;
use libfuzzer_sys::fuzz_target;

// Parsing must never panic, and anything accepted must survive a round trip.
fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    if let Ok(cfg) = ExperimentConfig::from_toml(text) {
        let again = ExperimentConfig::from_toml(&cfg.to_toml()).expect("echoed config parses");
        assert_eq!(cfg, again);
    }
});
