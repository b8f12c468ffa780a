#![no_main]

use libfuzzer_sys::fuzz_target;
use snpeb::io::{parse_two_group, pooled_two_sample, Pooling};

fuzz_target!(|data: &[u8]| {
    if let Ok(tg) = parse_two_group(data) {
        for pooling in [Pooling::Printed, Pooling::Standard] {
            let _ = pooled_two_sample(&tg.group1, &tg.group2, pooling);
        }
    }
});
