#![no_main]

use hvac_tune::sysid::ArxModel;
use libfuzzer_sys::fuzz_target;

// accepted models survive a write/read cycle unchanged
fuzz_target!(|data: &str| {
    if let Ok(m) = ArxModel::from_json(data) {
        let again = ArxModel::from_json(&m.to_json().unwrap()).unwrap();
        assert_eq!(m, again);
    }
});
