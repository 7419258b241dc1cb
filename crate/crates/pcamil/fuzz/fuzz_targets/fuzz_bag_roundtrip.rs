#![no_main]

use libfuzzer_sys::fuzz_target;
use ndarray::Array2;
use pcamil::data::{decode_feature_bag, encode_feature_bag, FeatureBag};

// Interprets the input as a shape header plus f32 payload; every bag the
// constructor accepts must round-trip bit-exactly through the container.
fuzz_target!(|data: &[u8]| {
    if data.len() < 2 {
        return;
    }
    let n = 2 + (data[0] % 14) as usize;
    let d = 2 + (data[1] % 14) as usize;
    let need = n * d * 4;
    let payload = &data[2..];
    if payload.len() < need {
        return;
    }
    let values: Vec<f32> = payload[..need]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    let matrix = Array2::from_shape_vec((n, d), values).unwrap();
    let Ok(bag) = FeatureBag::new("fuzz", matrix) else {
        return;
    };
    let mut encoded = Vec::new();
    encode_feature_bag(&bag, &mut encoded).unwrap();
    let decoded = decode_feature_bag(encoded.as_slice(), "fuzz").unwrap();
    assert_eq!(bag, decoded);
});
