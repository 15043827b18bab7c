#![no_main]

use chrono::NaiveDate;
use hvac_tune::model::{parse_weather_csv, resample_weather, TimeGrid};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(samples) = parse_weather_csv(data) else {
        return;
    };
    let start = NaiveDate::from_ymd_opt(2024, 1, 1)
        .unwrap()
        .and_hms_opt(0, 0, 0)
        .unwrap();
    let grid = TimeGrid::new(start, 900, 96).unwrap();
    if let Ok(w) = resample_weather(&samples, grid) {
        assert!(w.solar().iter().all(|s| *s >= 0.0));
    }
});
