#![no_main]

use bellman_lab::cli::ExperimentConfig;
use libfuzzer_sys::fuzz_target;

// Validated configs must turn into models, utilities and grids without
// panicking; errors are fine.
fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    if let Ok(cfg) = ExperimentConfig::from_toml(text) {
        let _ = cfg.market();
        let _ = cfg.utility_spec();
        let _ = cfg.time_grid();
    }
});
