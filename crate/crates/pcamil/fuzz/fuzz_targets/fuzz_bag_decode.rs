#![no_main]

use libfuzzer_sys::fuzz_target;
use pcamil::data::decode_feature_bag;

fuzz_target!(|data: &[u8]| {
    let _ = decode_feature_bag(data, "fuzz");
});
