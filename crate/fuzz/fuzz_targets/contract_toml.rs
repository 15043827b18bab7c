#![no_main]

use hvac_tune::billing::parse_contracts_toml;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &str| {
    let _ = parse_contracts_toml(data);
});
