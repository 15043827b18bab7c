#![no_main]

use hvac_tune::experiment::parse_experiment_toml;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &str| {
    let _ = parse_experiment_toml(data);
});
