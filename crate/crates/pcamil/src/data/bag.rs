//! The `MILB` bag container: a 16-byte header followed by the row-major
//! float payload.
//!
//! Layout (all integers little-endian):
//!
//! | bytes  | field                         |
//! |--------|-------------------------------|
//! | 0..4   | magic `MILB`                  |
//! | 4..8   | version (u32, currently 1)    |
//! | 8..12  | patch count N (u32)           |
//! | 12..16 | feature dim d (u32)           |
//! | 16..   | N*d IEEE-754 binary32 values  |
//!
//! The payload is patch-major: patch 0's d features, then patch 1's, and so
//! on. The patient id is the file stem, so `write` followed by `read` on a
//! `<patient_id>.milb` path reproduces the bag bit-exactly.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::Array2;

use super::{DataError, FeatureBag};

pub(crate) const BAG_MAGIC: [u8; 4] = *b"MILB";
pub(crate) const BAG_VERSION: u32 = 1;

/// Decodes a bag from any reader. `patient_id` is supplied by the caller
/// because the container does not store it.
pub fn decode_feature_bag<R: Read>(
    reader: R,
    patient_id: impl Into<String>,
) -> Result<FeatureBag, DataError> {
    let (n, d, payload) = decode_container(reader, BAG_MAGIC, BAG_VERSION, 4)?;
    let mut values = Vec::with_capacity(payload.len() / 4);
    let mut cursor = payload.as_slice();
    while let Ok(v) = cursor.read_f32::<LittleEndian>() {
        values.push(v);
    }
    let features = Array2::from_shape_vec((n, d), values).expect("payload length checked");
    FeatureBag::new(patient_id, features)
}

/// Encodes a bag into any writer.
pub fn encode_feature_bag<W: Write>(bag: &FeatureBag, mut writer: W) -> Result<(), DataError> {
    writer.write_all(&BAG_MAGIC)?;
    writer.write_u32::<LittleEndian>(BAG_VERSION)?;
    writer.write_u32::<LittleEndian>(bag.n_patches() as u32)?;
    writer.write_u32::<LittleEndian>(bag.feature_dim() as u32)?;
    for &v in bag.features().iter() {
        writer.write_f32::<LittleEndian>(v)?;
    }
    Ok(())
}

/// Reads a bag file; the patient id is the file stem.
pub fn read_feature_bag(path: &Path) -> Result<FeatureBag, DataError> {
    let patient_id = patient_id_from_path(path)?;
    let file = File::open(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => DataError::MissingFile(path.to_path_buf()),
        _ => DataError::Io(e),
    })?;
    decode_feature_bag(BufReader::new(file), patient_id)
}

/// Writes a bag file. Pair with a `<patient_id>.milb` file name so that
/// `read_feature_bag` recovers the same bag.
pub fn write_feature_bag(bag: &FeatureBag, path: &Path) -> Result<(), DataError> {
    let file = File::create(path)?;
    let mut writer = BufWriter::new(file);
    encode_feature_bag(bag, &mut writer)?;
    writer.flush()?;
    Ok(())
}

pub(crate) fn patient_id_from_path(path: &Path) -> Result<String, DataError> {
    path.file_stem()
        .and_then(|s| s.to_str())
        .map(|s| s.to_string())
        .ok_or_else(|| DataError::InvalidPath(path.to_path_buf()))
}

/// Shared header + payload framing for the `MIL*` containers. Returns the
/// two u32 shape fields and the raw payload of `rows * cols * elem_size`
/// bytes. Rejects wrong magic, wrong version, short payloads, and trailing
/// garbage. The payload is never pre-allocated from header values, so a
/// hostile header cannot force a large allocation.
pub(crate) fn decode_container<R: Read>(
    mut reader: R,
    magic: [u8; 4],
    version: u32,
    elem_size: u64,
) -> Result<(usize, usize, Vec<u8>), DataError> {
    let mut found_magic = [0u8; 4];
    read_exact_or_truncated(&mut reader, &mut found_magic, 4)?;
    if found_magic != magic {
        return Err(DataError::BadMagic { expected: magic });
    }
    let found_version = read_u32_or_truncated(&mut reader)?;
    if found_version != version {
        return Err(DataError::VersionMismatch {
            found: found_version,
            expected: version,
        });
    }
    let rows = read_u32_or_truncated(&mut reader)? as u64;
    let cols = read_u32_or_truncated(&mut reader)? as u64;
    let expected = rows
        .checked_mul(cols)
        .and_then(|n| n.checked_mul(elem_size))
        .ok_or(DataError::TruncatedPayload {
            expected: u64::MAX,
            actual: 0,
        })?;

    let mut payload = Vec::new();
    let mut limited = reader.by_ref().take(expected);
    limited.read_to_end(&mut payload)?;
    if (payload.len() as u64) < expected {
        return Err(DataError::TruncatedPayload {
            expected,
            actual: payload.len() as u64,
        });
    }
    let trailing = {
        let mut rest = Vec::new();
        reader.take(1024).read_to_end(&mut rest)? as u64
    };
    if trailing > 0 {
        return Err(DataError::TrailingBytes(trailing));
    }
    Ok((rows as usize, cols as usize, payload))
}

fn read_exact_or_truncated<R: Read>(
    reader: &mut R,
    buf: &mut [u8],
    expected: u64,
) -> Result<(), DataError> {
    reader.read_exact(buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => DataError::TruncatedPayload {
            expected,
            actual: 0,
        },
        _ => DataError::Io(e),
    })
}

fn read_u32_or_truncated<R: Read>(reader: &mut R) -> Result<u32, DataError> {
    reader
        .read_u32::<LittleEndian>()
        .map_err(|e| match e.kind() {
            std::io::ErrorKind::UnexpectedEof => DataError::TruncatedPayload {
                expected: 4,
                actual: 0,
            },
            _ => DataError::Io(e),
        })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use std::io::Cursor;

    fn sample_bag() -> FeatureBag {
        FeatureBag::new(
            "p0",
            array![[1.0f32, 2.0, 3.0], [4.0, 5.0, -6.5], [0.25, 0.5, 0.75]],
        )
        .unwrap()
    }

    #[test]
    fn roundtrip_is_bit_exact() {
        let bag = sample_bag();
        let mut buf = Vec::new();
        encode_feature_bag(&bag, &mut buf).unwrap();
        let back = decode_feature_bag(Cursor::new(&buf), "p0").unwrap();
        assert_eq!(bag, back);
    }

    #[test]
    fn file_roundtrip_uses_stem_as_patient_id() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p0.milb");
        let bag = sample_bag();
        write_feature_bag(&bag, &path).unwrap();
        let back = read_feature_bag(&path).unwrap();
        assert_eq!(bag, back);
        assert_eq!(back.patient_id(), "p0");
    }

    #[test]
    fn bad_magic_is_rejected() {
        let mut buf = Vec::new();
        encode_feature_bag(&sample_bag(), &mut buf).unwrap();
        buf[..4].copy_from_slice(b"XXXX");
        match decode_feature_bag(Cursor::new(&buf), "p0") {
            Err(DataError::BadMagic { .. }) => {}
            other => panic!("expected BadMagic, got {other:?}"),
        }
    }

    #[test]
    fn version_mismatch_is_rejected() {
        let mut buf = Vec::new();
        encode_feature_bag(&sample_bag(), &mut buf).unwrap();
        buf[4] = 9;
        match decode_feature_bag(Cursor::new(&buf), "p0") {
            Err(DataError::VersionMismatch { found: 9, .. }) => {}
            other => panic!("expected VersionMismatch, got {other:?}"),
        }
    }

    #[test]
    fn truncated_payload_is_rejected() {
        // Header declares 10x10 but only 50 floats follow.
        let mut buf = Vec::new();
        buf.extend_from_slice(&BAG_MAGIC);
        buf.extend_from_slice(&1u32.to_le_bytes());
        buf.extend_from_slice(&10u32.to_le_bytes());
        buf.extend_from_slice(&10u32.to_le_bytes());
        for i in 0..50 {
            buf.extend_from_slice(&(i as f32).to_le_bytes());
        }
        match decode_feature_bag(Cursor::new(&buf), "p0") {
            Err(DataError::TruncatedPayload {
                expected: 400,
                actual: 200,
            }) => {}
            other => panic!("expected TruncatedPayload, got {other:?}"),
        }
    }

    #[test]
    fn trailing_bytes_are_rejected() {
        let mut buf = Vec::new();
        encode_feature_bag(&sample_bag(), &mut buf).unwrap();
        buf.push(0);
        match decode_feature_bag(Cursor::new(&buf), "p0") {
            Err(DataError::TrailingBytes(1)) => {}
            other => panic!("expected TrailingBytes, got {other:?}"),
        }
    }

    #[test]
    fn non_finite_entries_are_rejected() {
        let mut buf = Vec::new();
        encode_feature_bag(&sample_bag(), &mut buf).unwrap();
        buf[16..20].copy_from_slice(&f32::NAN.to_le_bytes());
        match decode_feature_bag(Cursor::new(&buf), "p0") {
            Err(DataError::NonFiniteEntry { row: 0, col: 0 }) => {}
            other => panic!("expected NonFiniteEntry, got {other:?}"),
        }
    }

    #[test]
    fn single_patch_bag_is_rejected() {
        let mut buf = Vec::new();
        buf.extend_from_slice(&BAG_MAGIC);
        buf.extend_from_slice(&1u32.to_le_bytes());
        buf.extend_from_slice(&1u32.to_le_bytes());
        buf.extend_from_slice(&2u32.to_le_bytes());
        buf.extend_from_slice(&1.0f32.to_le_bytes());
        buf.extend_from_slice(&2.0f32.to_le_bytes());
        match decode_feature_bag(Cursor::new(&buf), "p0") {
            Err(DataError::InvalidShape { n: 1, d: 2 }) => {}
            other => panic!("expected InvalidShape, got {other:?}"),
        }
    }
}
