#![no_main]

use hvac_tune::qp::parse_qp_dump;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(p) = parse_qp_dump(data) {
        assert_eq!(parse_qp_dump(p.to_dump().as_bytes()).unwrap(), p);
    }
});
