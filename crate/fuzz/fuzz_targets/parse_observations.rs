#![no_main]

use libfuzzer_sys::fuzz_target;
use snpeb::io::parse_observations;

fuzz_target!(|data: &[u8]| {
    if let Ok(ds) = parse_observations(data) {
        assert_eq!(ds.y().len(), ds.sigma().len());
        assert!(ds.sigma().iter().all(|s| *s > 0.0 && s.is_finite()));
    }
});
