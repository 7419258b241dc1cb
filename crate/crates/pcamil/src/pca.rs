//! Per-patient eigenvector embedding.
//!
//! A patient's bag is reduced to the top-k eigenvectors of its centered
//! patch-feature covariance; those eigenvectors (not the projected patches)
//! are the instances the MIL network consumes. When a bag has fewer patches
//! than features the eigenpairs come from the `N x N` Gram matrix instead of
//! the `d x d` covariance, which is the only viable route at full feature
//! scale; both routes produce identical spectra.
//!
//! Eigenvectors are unit-norm with a canonical sign (largest-magnitude
//! component positive) so repeated runs and different backends yield
//! identical embeddings. Centering bounds the usable rank at `N - 1`; when
//! fewer than `k` eigenvalues survive the rank tolerance, as many as possible
//! are returned.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::{Array1, Array2, Axis};
use thiserror::Error;

use crate::data::{DataError, FeatureBag};

/// Relative rank tolerance: eigenvalues at or below `eps_rank * lambda_max`
/// are treated as numerically zero.
pub const DEFAULT_EPS_RANK: f64 = 1e-10;

const EIGEN_MAGIC: [u8; 4] = *b"MILE";
const EIGEN_VERSION: u32 = 1;

/// Computed-path orthonormality tolerance.
const ORTHO_TOL: f64 = 1e-8;
/// Cache-path tolerance: vectors are stored as f32, so rounding keeps
/// orthonormality only to single precision.
const CACHE_ORTHO_TOL: f64 = 1e-4;

#[derive(Debug, Error)]
pub enum PcaError {
    #[error("bag {patient_id:?} is degenerate: no eigenvalue exceeds the rank tolerance")]
    DegenerateBag { patient_id: String },
    #[error("requested eigenvector count must be at least 1")]
    InvalidK,
    #[error("eigenbasis rows are not orthonormal (max deviation {max_dev:e})")]
    NotOrthonormal { max_dev: f64 },
    #[error("eigenvalues must be finite, non-negative, and non-increasing")]
    BadEigenvalues,
    #[error(transparent)]
    Data(#[from] DataError),
}

/// A patient's top-k' principal eigenvectors and eigenvalues.
#[derive(Debug, Clone, PartialEq)]
pub struct EigenBasis {
    patient_id: String,
    /// `k' x d`, unit-norm rows, canonical sign.
    vectors: Array2<f64>,
    /// Non-increasing, all above the rank tolerance.
    eigenvalues: Vec<f64>,
    k_requested: usize,
}

impl EigenBasis {
    /// Builds a basis, enforcing the full double-precision invariants.
    pub fn new(
        patient_id: impl Into<String>,
        vectors: Array2<f64>,
        eigenvalues: Vec<f64>,
        k_requested: usize,
    ) -> Result<Self, PcaError> {
        Self::build(patient_id, vectors, eigenvalues, k_requested, ORTHO_TOL)
    }

    fn build(
        patient_id: impl Into<String>,
        vectors: Array2<f64>,
        eigenvalues: Vec<f64>,
        k_requested: usize,
        ortho_tol: f64,
    ) -> Result<Self, PcaError> {
        if vectors.nrows() != eigenvalues.len() || vectors.nrows() == 0 || k_requested == 0 {
            return Err(PcaError::InvalidK);
        }
        let sorted = eigenvalues
            .windows(2)
            .all(|w| w[0] >= w[1]);
        if !sorted || eigenvalues.iter().any(|&l| !l.is_finite() || l < 0.0) {
            return Err(PcaError::BadEigenvalues);
        }
        let mut max_dev: f64 = 0.0;
        for i in 0..vectors.nrows() {
            for j in i..vectors.nrows() {
                let dot = vectors.row(i).dot(&vectors.row(j));
                let want = if i == j { 1.0 } else { 0.0 };
                max_dev = max_dev.max((dot - want).abs());
            }
        }
        if max_dev > ortho_tol {
            return Err(PcaError::NotOrthonormal { max_dev });
        }
        Ok(EigenBasis {
            patient_id: patient_id.into(),
            vectors,
            eigenvalues,
            k_requested,
        })
    }

    pub fn patient_id(&self) -> &str {
        &self.patient_id
    }

    /// Number of eigenvectors actually kept (`k' <= k_requested`).
    pub fn k_kept(&self) -> usize {
        self.eigenvalues.len()
    }

    pub fn k_requested(&self) -> usize {
        self.k_requested
    }

    pub fn feature_dim(&self) -> usize {
        self.vectors.ncols()
    }

    pub fn vectors(&self) -> &Array2<f64> {
        &self.vectors
    }

    pub fn eigenvalues(&self) -> &[f64] {
        &self.eigenvalues
    }

    /// The same basis truncated to at most `k` leading eigenvectors.
    /// Identical to recomputing the embedding with the smaller `k`, since
    /// eigenpairs are kept in descending eigenvalue order.
    pub fn truncated(&self, k: usize) -> EigenBasis {
        let keep = self.k_kept().min(k.max(1));
        EigenBasis {
            patient_id: self.patient_id.clone(),
            vectors: self.vectors.slice(ndarray::s![..keep, ..]).to_owned(),
            eigenvalues: self.eigenvalues[..keep].to_vec(),
            k_requested: k.max(1),
        }
    }

    /// Instance matrix handed to the MIL network: unit-norm rows, or rows
    /// scaled by sqrt(eigenvalue) when `scale_by_eigenvalue` is set.
    pub fn instances(&self, scale_by_eigenvalue: bool) -> Array2<f64> {
        if !scale_by_eigenvalue {
            return self.vectors.clone();
        }
        let mut scaled = self.vectors.clone();
        for (mut row, &l) in scaled.rows_mut().into_iter().zip(&self.eigenvalues) {
            row.mapv_inplace(|v| v * l.sqrt());
        }
        scaled
    }
}

/// Embeds one bag: center, eigendecompose (Gram route when `N < d`), keep
/// eigenpairs above `eps_rank * lambda_max`, truncate to `k`, canonicalize
/// signs.
pub fn patient_embedding(bag: &FeatureBag, k: usize, eps_rank: f64) -> Result<EigenBasis, PcaError> {
    if k < 1 {
        return Err(PcaError::InvalidK);
    }
    let x = bag.features_f64();
    let n = x.nrows();
    let d = x.ncols();
    let mean = x.mean_axis(Axis(0)).expect("bag has at least 2 patches");
    let centered = &x - &mean.view().insert_axis(Axis(0));
    let denom = (n - 1) as f64;

    let mut pairs: Vec<(f64, Array1<f64>)> = if n < d {
        let gram = centered.dot(&centered.t()) / denom;
        let eig = symmetric_eigen(&gram);
        eig.into_iter()
            .map(|(lambda, v)| {
                let u = centered.t().dot(&v);
                (lambda, u)
            })
            .collect()
    } else {
        let cov = centered.t().dot(&centered) / denom;
        symmetric_eigen(&cov)
    };

    pairs.sort_by(|a, b| b.0.partial_cmp(&a.0).expect("finite eigenvalues"));
    let lambda_max = pairs.first().map(|p| p.0).unwrap_or(0.0);
    if lambda_max <= 0.0 {
        return Err(PcaError::DegenerateBag {
            patient_id: bag.patient_id().to_string(),
        });
    }
    let threshold = eps_rank * lambda_max;
    pairs.retain(|(lambda, _)| *lambda > threshold);
    if pairs.is_empty() {
        return Err(PcaError::DegenerateBag {
            patient_id: bag.patient_id().to_string(),
        });
    }
    pairs.truncate(k);

    let k_kept = pairs.len();
    let mut vectors = Array2::<f64>::zeros((k_kept, d));
    let mut eigenvalues = Vec::with_capacity(k_kept);
    for (i, (lambda, mut u)) in pairs.into_iter().enumerate() {
        let norm = u.dot(&u).sqrt();
        u.mapv_inplace(|v| v / norm);
        canonicalize_sign(&mut u);
        vectors.row_mut(i).assign(&u);
        eigenvalues.push(lambda);
    }
    EigenBasis::new(bag.patient_id(), vectors, eigenvalues, k)
}

/// Flips the vector so its largest-magnitude component is positive; ties
/// resolve to the lowest index.
fn canonicalize_sign(v: &mut Array1<f64>) {
    let mut best = 0;
    let mut best_abs = f64::NEG_INFINITY;
    for (i, &x) in v.iter().enumerate() {
        if x.abs() > best_abs {
            best_abs = x.abs();
            best = i;
        }
    }
    if v[best] < 0.0 {
        v.mapv_inplace(|x| -x);
    }
}

/// Eigenpairs of a symmetric matrix as (eigenvalue, eigenvector) tuples,
/// unordered. Cyclic Jacobi with accumulated rotations: eigenvectors stay
/// orthonormal and correctly paired by construction, which matters here
/// because a mispaired near-null eigenvector would slip past the rank
/// filter and corrupt the basis. The input is symmetrized first to cancel
/// accumulation error.
fn symmetric_eigen(m: &Array2<f64>) -> Vec<(f64, Array1<f64>)> {
    let n = m.nrows();
    let mut a = Array2::<f64>::zeros((n, n));
    for i in 0..n {
        for j in 0..n {
            a[[i, j]] = 0.5 * (m[[i, j]] + m[[j, i]]);
        }
    }
    let mut v = Array2::<f64>::eye(n);
    let frobenius = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    if frobenius == 0.0 || n == 1 {
        return (0..n).map(|j| (a[[j, j]], v.column(j).to_owned())).collect();
    }
    let tol = f64::EPSILON * frobenius;

    const MAX_SWEEPS: usize = 64;
    for _ in 0..MAX_SWEEPS {
        let off: f64 = {
            let mut s = 0.0;
            for p in 0..n {
                for q in (p + 1)..n {
                    s += a[[p, q]] * a[[p, q]];
                }
            }
            (2.0 * s).sqrt()
        };
        if off <= tol {
            break;
        }
        for p in 0..n - 1 {
            for q in (p + 1)..n {
                let apq = a[[p, q]];
                if apq.abs() <= tol / (n as f64) {
                    continue;
                }
                // Symmetric Schur rotation zeroing a[p][q].
                let theta = (a[[q, q]] - a[[p, p]]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = a[[k, p]];
                    let akq = a[[k, q]];
                    a[[k, p]] = c * akp - s * akq;
                    a[[k, q]] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[[p, k]];
                    let aqk = a[[q, k]];
                    a[[p, k]] = c * apk - s * aqk;
                    a[[q, k]] = s * apk + c * aqk;
                }
                for k in 0..n {
                    let vkp = v[[k, p]];
                    let vkq = v[[k, q]];
                    v[[k, p]] = c * vkp - s * vkq;
                    v[[k, q]] = s * vkp + c * vkq;
                }
            }
        }
    }

    (0..n).map(|j| (a[[j, j]], v.column(j).to_owned())).collect()
}

/// Writes the `MILE` cache: magic, version, k', d, eigenvalues as f64 LE,
/// then vector rows as f32 LE. Like bags, the patient id is the file stem.
pub fn write_eigenbasis(basis: &EigenBasis, path: &Path) -> Result<(), PcaError> {
    let file = File::create(path).map_err(DataError::Io)?;
    let mut w = BufWriter::new(file);
    encode_eigenbasis(basis, &mut w)?;
    w.flush().map_err(DataError::Io)?;
    Ok(())
}

pub fn encode_eigenbasis<W: Write>(basis: &EigenBasis, mut writer: W) -> Result<(), PcaError> {
    let io = DataError::Io;
    writer.write_all(&EIGEN_MAGIC).map_err(io)?;
    writer
        .write_u32::<LittleEndian>(EIGEN_VERSION)
        .map_err(io)?;
    writer
        .write_u32::<LittleEndian>(basis.k_kept() as u32)
        .map_err(io)?;
    writer
        .write_u32::<LittleEndian>(basis.feature_dim() as u32)
        .map_err(io)?;
    for &l in basis.eigenvalues() {
        writer.write_f64::<LittleEndian>(l).map_err(io)?;
    }
    for &v in basis.vectors().iter() {
        writer.write_f32::<LittleEndian>(v as f32).map_err(io)?;
    }
    Ok(())
}

/// Reads a `MILE` cache file; the patient id is the file stem.
pub fn read_eigenbasis(path: &Path) -> Result<EigenBasis, PcaError> {
    let patient_id = crate::data::patient_id_from_path(path)?;
    let file = File::open(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => DataError::MissingFile(path.to_path_buf()),
        _ => DataError::Io(e),
    })?;
    decode_eigenbasis(BufReader::new(file), patient_id)
}

/// Decodes a `MILE` cache from any reader. Vectors come back at f32
/// precision, so the orthonormality check is correspondingly looser than on
/// the computed path.
pub fn decode_eigenbasis<R: Read>(
    mut reader: R,
    patient_id: impl Into<String>,
) -> Result<EigenBasis, PcaError> {
    let mut magic = [0u8; 4];
    read_exact(&mut reader, &mut magic)?;
    if magic != EIGEN_MAGIC {
        return Err(DataError::BadMagic {
            expected: EIGEN_MAGIC,
        }
        .into());
    }
    let version = read_u32(&mut reader)?;
    if version != EIGEN_VERSION {
        return Err(DataError::VersionMismatch {
            found: version,
            expected: EIGEN_VERSION,
        }
        .into());
    }
    let k = read_u32(&mut reader)? as u64;
    let d = read_u32(&mut reader)? as u64;
    let expected = k
        .checked_mul(8)
        .and_then(|b| k.checked_mul(d).map(|v| (b, v)))
        .and_then(|(b, v)| v.checked_mul(4).map(|vb| b + vb))
        .ok_or(DataError::TruncatedPayload {
            expected: u64::MAX,
            actual: 0,
        })?;
    let mut payload = Vec::new();
    reader
        .by_ref()
        .take(expected)
        .read_to_end(&mut payload)
        .map_err(DataError::Io)?;
    if (payload.len() as u64) < expected {
        return Err(DataError::TruncatedPayload {
            expected,
            actual: payload.len() as u64,
        }
        .into());
    }
    let mut rest = Vec::new();
    reader
        .take(1024)
        .read_to_end(&mut rest)
        .map_err(DataError::Io)?;
    if !rest.is_empty() {
        return Err(DataError::TrailingBytes(rest.len() as u64).into());
    }

    let (k, d) = (k as usize, d as usize);
    let mut cursor = payload.as_slice();
    let mut eigenvalues = Vec::with_capacity(k);
    for _ in 0..k {
        eigenvalues.push(cursor.read_f64::<LittleEndian>().map_err(DataError::Io)?);
    }
    let mut values = Vec::with_capacity(k * d);
    for _ in 0..k * d {
        let v = cursor.read_f32::<LittleEndian>().map_err(DataError::Io)?;
        if !v.is_finite() {
            return Err(DataError::NonFiniteEntry {
                row: values.len() / d.max(1),
                col: values.len() % d.max(1),
            }
            .into());
        }
        values.push(f64::from(v));
    }
    let vectors = Array2::from_shape_vec((k, d), values).expect("length checked");
    // k_requested is not stored in the container; a cache-loaded basis
    // reports what it holds.
    EigenBasis::build(patient_id, vectors, eigenvalues, k.max(1), CACHE_ORTHO_TOL)
}

fn read_exact<R: Read>(reader: &mut R, buf: &mut [u8]) -> Result<(), PcaError> {
    reader.read_exact(buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => DataError::TruncatedPayload {
            expected: buf.len() as u64,
            actual: 0,
        }
        .into(),
        _ => PcaError::Data(DataError::Io(e)),
    })
}

fn read_u32<R: Read>(reader: &mut R) -> Result<u32, PcaError> {
    reader
        .read_u32::<LittleEndian>()
        .map_err(|e| match e.kind() {
            std::io::ErrorKind::UnexpectedEof => DataError::TruncatedPayload {
                expected: 4,
                actual: 0,
            }
            .into(),
            _ => PcaError::Data(DataError::Io(e)),
        })
}
