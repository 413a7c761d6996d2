#![no_main]

use ccb_core::disruptions::TruncateLimit;
use ccb_core::harness::ExperimentConfig;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|text: &str| {
    if let Ok(config) = ExperimentConfig::parse(text, "/nonexistent") {
        let _ = ccb_core::harness::plan_cells(&config, None);
    }
    let _ = text.parse::<TruncateLimit>();
});
