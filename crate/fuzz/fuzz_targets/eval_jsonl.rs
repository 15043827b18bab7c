#![no_main]

use hvac_tune::config_opt::read_eval_log;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let _ = read_eval_log(data);
});
