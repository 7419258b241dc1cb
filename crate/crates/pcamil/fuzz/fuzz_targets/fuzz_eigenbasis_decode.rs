#![no_main]

use libfuzzer_sys::fuzz_target;
use pcamil::pca::decode_eigenbasis;

fuzz_target!(|data: &[u8]| {
    let _ = decode_eigenbasis(data, "fuzz");
});
