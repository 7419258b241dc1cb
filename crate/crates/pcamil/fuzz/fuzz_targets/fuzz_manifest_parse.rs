#![no_main]

use libfuzzer_sys::fuzz_target;
use pcamil::data::{parse_manifest, SplitTag};

fuzz_target!(|data: &[u8]| {
    let _ = parse_manifest(data, SplitTag::Train, None);
});
