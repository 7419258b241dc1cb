//! Container round-trip and decoder-robustness properties.

use ndarray::Array2;
use pcamil::data::{decode_feature_bag, encode_feature_bag, FeatureBag};
use pcamil::mil::decode_checkpoint;
use pcamil::pca::decode_eigenbasis;
use proptest::prelude::*;

fn finite_f32() -> impl Strategy<Value = f32> {
    // Full finite range, no NaN/Inf: the container rejects those by design.
    prop::num::f32::NORMAL | prop::num::f32::ZERO | prop::num::f32::SUBNORMAL
}

/// The checked-in fuzz corpus seeds must stay valid for their decoders.
#[test]
fn fuzz_corpus_seeds_parse() {
    let corpus = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("fuzz/corpus");
    let bytes = |rel: &str| std::fs::read(corpus.join(rel)).unwrap();

    decode_feature_bag(bytes("fuzz_bag_decode/valid_bag").as_slice(), "seed").unwrap();
    decode_eigenbasis(
        bytes("fuzz_eigenbasis_decode/valid_eigenbasis").as_slice(),
        "seed",
    )
    .unwrap();
    decode_checkpoint(bytes("fuzz_checkpoint_decode/valid_checkpoint").as_slice()).unwrap();
    pcamil::data::parse_manifest(
        bytes("fuzz_manifest_parse/valid_manifest").as_slice(),
        pcamil::data::SplitTag::Train,
        None,
    )
    .unwrap();
    pcamil::harness::ExperimentConfig::from_json_str(
        std::str::from_utf8(&bytes("fuzz_config_parse/valid_config")).unwrap(),
    )
    .unwrap();
}

proptest! {
    /// write then read is the identity, bit-exactly, for any finite bag.
    #[test]
    fn bag_roundtrip_is_identity(
        n in 2usize..12,
        d in 2usize..10,
        seed_values in prop::collection::vec(finite_f32(), 2 * 10 * 12),
    ) {
        let values: Vec<f32> = seed_values.into_iter().take(n * d).collect();
        prop_assume!(values.len() == n * d);
        let bag = FeatureBag::new("p", Array2::from_shape_vec((n, d), values).unwrap()).unwrap();
        let mut buf = Vec::new();
        encode_feature_bag(&bag, &mut buf).unwrap();
        let back = decode_feature_bag(buf.as_slice(), "p").unwrap();
        prop_assert_eq!(bag, back);
    }

    /// Arbitrary bytes never panic any container decoder; they either parse
    /// or produce a typed error.
    #[test]
    fn decoders_tolerate_arbitrary_bytes(bytes in prop::collection::vec(any::<u8>(), 0..256)) {
        let _ = decode_feature_bag(bytes.as_slice(), "p");
        let _ = decode_eigenbasis(bytes.as_slice(), "p");
        let _ = decode_checkpoint(bytes.as_slice());
    }

    /// Bytes that share a valid header prefix but are mangled afterwards
    /// also never panic.
    #[test]
    fn decoders_tolerate_mangled_valid_prefixes(
        flip_at in 0usize..64,
        flip_to in any::<u8>(),
    ) {
        let bag = FeatureBag::new(
            "p",
            Array2::from_shape_vec((3, 4), (0..12).map(|v| v as f32).collect()).unwrap(),
        )
        .unwrap();
        let mut buf = Vec::new();
        encode_feature_bag(&bag, &mut buf).unwrap();
        if flip_at < buf.len() {
            buf[flip_at] = flip_to;
        }
        let _ = decode_feature_bag(buf.as_slice(), "p");
    }
}
