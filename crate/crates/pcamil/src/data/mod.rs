//! Domain types, the feature-bag container format, dataset manifests, and the
//! synthetic dataset generator.
//!
//! A *bag* is one patient's `N x d` matrix of patch features; the patient id is
//! carried by the bag file's name (stem), not by the payload. Manifests are CSV
//! files listing one patient per row. All types are immutable after
//! construction and safe to share across worker threads.

mod bag;
mod manifest;
mod synth;

pub use bag::{decode_feature_bag, encode_feature_bag, read_feature_bag, write_feature_bag};
pub(crate) use bag::patient_id_from_path;
pub use manifest::{load_manifest, parse_manifest, save_manifest};
pub use synth::{generate_synthetic, SynthConfig};

use std::fmt;
use std::path::PathBuf;

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Errors raised by dataset loading, container decoding, and synthesis.
#[derive(Debug, Error)]
pub enum DataError {
    #[error("file not found: {0}")]
    MissingFile(PathBuf),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("manifest header must be exactly `patient_id,label,side,bag_path`")]
    BadHeader,
    #[error("malformed manifest row at line {line}")]
    MalformedRow { line: u64 },
    #[error("unknown label {value:?} at line {line}")]
    UnknownLabel { value: String, line: u64 },
    #[error("unknown side {value:?} at line {line}")]
    UnknownSide { value: String, line: u64 },
    #[error("duplicate patient id {0:?}")]
    DuplicatePatientId(String),
    #[error("manifest contains no records")]
    EmptyManifest,
    #[error("bad magic bytes (expected {expected:?})")]
    BadMagic { expected: [u8; 4] },
    #[error("unsupported container version {found} (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("truncated payload: header declares {expected} bytes, found {actual}")]
    TruncatedPayload { expected: u64, actual: u64 },
    #[error("container has {0} trailing bytes past the declared payload")]
    TrailingBytes(u64),
    #[error("non-finite entry at row {row}, column {col}")]
    NonFiniteEntry { row: usize, col: usize },
    #[error("invalid bag shape {n}x{d}: need at least 2 patches and 2 features")]
    InvalidShape { n: usize, d: usize },
    #[error("cannot derive a patient id from path {0}")]
    InvalidPath(PathBuf),
    #[error("bag file {path} holds patient {found:?}, manifest says {expected:?}")]
    PatientIdMismatch {
        path: PathBuf,
        expected: String,
        found: String,
    },
    #[error("feature dim {found} of patient {patient_id} differs from {expected}")]
    InconsistentFeatureDim {
        patient_id: String,
        expected: usize,
        found: usize,
    },
    #[error("invalid synthesis config: {0}")]
    InvalidConfig(String),
}

/// Binary class label. MSI is the positive class everywhere.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Label {
    Msi,
    Mss,
}

impl Label {
    pub fn parse(s: &str) -> Option<Label> {
        match s.trim().to_ascii_lowercase().as_str() {
            "msi" => Some(Label::Msi),
            "mss" => Some(Label::Mss),
            _ => None,
        }
    }

    /// Regression target: MSI = 1, MSS = 0.
    pub fn as_target(self) -> f64 {
        match self {
            Label::Msi => 1.0,
            Label::Mss => 0.0,
        }
    }

    pub fn is_positive(self) -> bool {
        self == Label::Msi
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Label::Msi => "MSI",
            Label::Mss => "MSS",
        })
    }
}

/// Anatomic side of the tumor within the colon.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Side {
    Left,
    Right,
    Undefined,
}

impl Side {
    pub fn parse(s: &str) -> Option<Side> {
        match s.trim().to_ascii_lowercase().as_str() {
            "left" => Some(Side::Left),
            "right" => Some(Side::Right),
            "undefined" => Some(Side::Undefined),
            _ => None,
        }
    }
}

impl fmt::Display for Side {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Side::Left => "left",
            Side::Right => "right",
            Side::Undefined => "undefined",
        })
    }
}

/// Which split a manifest describes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SplitTag {
    Train,
    Test,
}

impl fmt::Display for SplitTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SplitTag::Train => "train",
            SplitTag::Test => "test",
        })
    }
}

/// One patient's `N x d` patch-feature matrix. Row `i` is patch `i`'s
/// flattened feature vector.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureBag {
    patient_id: String,
    features: Array2<f32>,
}

impl FeatureBag {
    /// Validates shape (at least 2 patches, 2 features) and finiteness.
    pub fn new(patient_id: impl Into<String>, features: Array2<f32>) -> Result<Self, DataError> {
        let (n, d) = features.dim();
        if n < 2 || d < 2 {
            return Err(DataError::InvalidShape { n, d });
        }
        for ((row, col), &v) in features.indexed_iter() {
            if !v.is_finite() {
                return Err(DataError::NonFiniteEntry { row, col });
            }
        }
        Ok(FeatureBag {
            patient_id: patient_id.into(),
            features,
        })
    }

    pub fn patient_id(&self) -> &str {
        &self.patient_id
    }

    pub fn features(&self) -> &Array2<f32> {
        &self.features
    }

    pub fn n_patches(&self) -> usize {
        self.features.nrows()
    }

    pub fn feature_dim(&self) -> usize {
        self.features.ncols()
    }

    /// The feature matrix widened to f64, as used by all numerics downstream.
    pub fn features_f64(&self) -> Array2<f64> {
        self.features.mapv(f64::from)
    }
}

/// One manifest row: identity, label, side, and where the bag lives.
#[derive(Debug, Clone, PartialEq)]
pub struct PatientRecord {
    pub patient_id: String,
    pub label: Label,
    pub side: Side,
    /// Resolved path of the bag file (relative CSV entries are resolved
    /// against the manifest's directory at load time).
    pub bag_path: PathBuf,
}

/// A split's worth of patient records.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub records: Vec<PatientRecord>,
    pub split_tag: SplitTag,
}

impl DatasetManifest {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn labels(&self) -> Vec<Label> {
        self.records.iter().map(|r| r.label).collect()
    }

    /// Reads every referenced bag and checks the manifest-wide invariants:
    /// each bag exists, is finite, its file stem matches the record's patient
    /// id, and the feature dimension is constant. Returns that dimension.
    pub fn validate_bags(&self) -> Result<usize, DataError> {
        let mut dim: Option<usize> = None;
        for record in &self.records {
            let bag = read_feature_bag(&record.bag_path)?;
            if bag.patient_id() != record.patient_id {
                return Err(DataError::PatientIdMismatch {
                    path: record.bag_path.clone(),
                    expected: record.patient_id.clone(),
                    found: bag.patient_id().to_string(),
                });
            }
            match dim {
                None => dim = Some(bag.feature_dim()),
                Some(expected) if expected != bag.feature_dim() => {
                    return Err(DataError::InconsistentFeatureDim {
                        patient_id: record.patient_id.clone(),
                        expected,
                        found: bag.feature_dim(),
                    });
                }
                _ => {}
            }
        }
        dim.ok_or(DataError::EmptyManifest)
    }
}
