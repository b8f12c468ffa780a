#![no_main]

use libfuzzer_sys::fuzz_target;
use snpeb::io::parse_prior_json;
use snpeb::MixturePrior;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    if let Ok(prior) = parse_prior_json(text) {
        let total: f64 = prior.atom_weights().iter().sum();
        assert!((total - 1.0).abs() < 1e-6);
    }
});
