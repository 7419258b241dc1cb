//! Synthetic feature-bag generator.
//!
//! Class identity is planted in the principal subspace of each patient's
//! patch cloud, not in the patch mean: every patch is `U_c * z + eps` where
//! `U_c` is a fixed orthonormal `d x r` basis per class, `z` has decreasing
//! per-axis variances, and `eps` is isotropic noise. Tumor side is sampled
//! from the label-conditional prevalences, so the side carries real signal
//! about the label, mirroring the cohort the defaults are modeled on.
//!
//! Determinism: everything is a pure function of the config. RNG streams are
//! domain-separated so that train and test splits generated from the same
//! seed share the class bases but draw independent patients.

use std::path::Path;

use ndarray::{Array1, Array2};
use rand::distributions::Distribution;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{
    write_feature_bag, DataError, DatasetManifest, FeatureBag, Label, PatientRecord, Side,
    SplitTag,
};

/// Signal variance along the leading subspace axis and the per-axis decay.
/// Axis `j` (0-based) of `z` has variance `SIGNAL_VAR * SIGNAL_DECAY^j`.
const SIGNAL_VAR: f64 = 6.0;
const SIGNAL_DECAY: f64 = 0.8;

/// RNG stream ids; bases are drawn on their own stream so both splits of a
/// seed see the same class subspaces.
const STREAM_BASES: u64 = 0;
const STREAM_TRAIN: u64 = 1;
const STREAM_TEST: u64 = 2;

/// Parameters of the synthetic cohort.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub n_patients: usize,
    /// Fraction of patients labeled MSI; the count is rounded half away
    /// from zero and exact, not sampled.
    pub msi_fraction: f64,
    pub patches_min: usize,
    pub patches_max: usize,
    pub feature_dim: usize,
    /// Rank of the planted class subspace.
    pub signal_rank: usize,
    /// Isotropic noise scale added to every patch.
    pub noise_sigma: f64,
    pub p_right_given_msi: f64,
    pub p_right_given_mss: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_patients: 260,
            msi_fraction: 0.18,
            patches_min: 12,
            patches_max: 64,
            feature_dim: 64,
            signal_rank: 4,
            noise_sigma: 1.45,
            p_right_given_msi: 0.87,
            // Solves 0.87*0.18 + p*0.82 = 0.44, the cohort's overall
            // right-sided marginal.
            p_right_given_mss: 0.3456,
            seed: 42,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<(), DataError> {
        let fail = |msg: String| Err(DataError::InvalidConfig(msg));
        if self.n_patients == 0 {
            return fail("n_patients must be positive".into());
        }
        if !(self.msi_fraction > 0.0 && self.msi_fraction < 1.0) {
            return fail(format!("msi_fraction {} not in (0,1)", self.msi_fraction));
        }
        if self.patches_min < 2 || self.patches_min > self.patches_max {
            return fail(format!(
                "patch count range [{}, {}] invalid (need 2 <= min <= max)",
                self.patches_min, self.patches_max
            ));
        }
        if self.feature_dim < 2 {
            return fail(format!("feature_dim {} < 2", self.feature_dim));
        }
        if self.signal_rank == 0
            || self.signal_rank >= self.patches_min.saturating_sub(1).max(1)
            || self.signal_rank >= self.feature_dim
        {
            return fail(format!(
                "signal_rank {} must satisfy 1 <= r < min(patches_min - 1, feature_dim)",
                self.signal_rank
            ));
        }
        if !(self.noise_sigma > 0.0) {
            return fail(format!("noise_sigma {} must be > 0", self.noise_sigma));
        }
        for (name, p) in [
            ("p_right_given_msi", self.p_right_given_msi),
            ("p_right_given_mss", self.p_right_given_mss),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return fail(format!("{name} {p} not in [0,1]"));
            }
        }
        Ok(())
    }

    /// Exact number of MSI patients (round half away from zero).
    pub fn n_msi(&self) -> usize {
        (self.n_patients as f64 * self.msi_fraction).round() as usize
    }

    /// The fixed class subspace bases `(U_MSI, U_MSS)`, each `d x r` with
    /// orthonormal columns. A pure function of the seed; exposed so that
    /// alignment diagnostics can compare recovered eigenvectors against the
    /// planted subspaces.
    pub fn signal_bases(&self) -> (Array2<f64>, Array2<f64>) {
        let mut rng = stream_rng(self.seed, STREAM_BASES);
        let msi = random_orthonormal(self.feature_dim, self.signal_rank, &mut rng);
        let mss = random_orthonormal(self.feature_dim, self.signal_rank, &mut rng);
        (msi, mss)
    }
}

/// Generates one split's bags under `out_dir/bags/` and returns its manifest.
/// Bag files are named `<patient_id>.milb`; records hold resolved paths.
pub fn generate_synthetic(
    cfg: &SynthConfig,
    split: SplitTag,
    out_dir: &Path,
) -> Result<DatasetManifest, DataError> {
    cfg.validate()?;
    let bag_dir = out_dir.join("bags");
    std::fs::create_dir_all(&bag_dir)?;

    let (basis_msi, basis_mss) = cfg.signal_bases();
    let lambdas: Vec<f64> = (0..cfg.signal_rank)
        .map(|j| SIGNAL_VAR * SIGNAL_DECAY.powi(j as i32))
        .collect();

    let stream = match split {
        SplitTag::Train => STREAM_TRAIN,
        SplitTag::Test => STREAM_TEST,
    };
    let mut rng = stream_rng(cfg.seed, stream);

    let mut labels = vec![Label::Msi; cfg.n_msi()];
    labels.resize(cfg.n_patients, Label::Mss);
    labels.shuffle(&mut rng);

    let mut records = Vec::with_capacity(cfg.n_patients);
    for (i, &label) in labels.iter().enumerate() {
        let patient_id = format!("synth-{split}-{i:04}");
        let p_right = match label {
            Label::Msi => cfg.p_right_given_msi,
            Label::Mss => cfg.p_right_given_mss,
        };
        let side = if rng.gen_bool(p_right) {
            Side::Right
        } else {
            Side::Left
        };
        let n_patches = rng.gen_range(cfg.patches_min..=cfg.patches_max);
        let basis = match label {
            Label::Msi => &basis_msi,
            Label::Mss => &basis_mss,
        };
        let patches = sample_patches(n_patches, basis, &lambdas, cfg.noise_sigma, &mut rng);
        let bag = FeatureBag::new(patient_id.clone(), patches.mapv(|v| v as f32))?;
        let bag_path = bag_dir.join(format!("{patient_id}.milb"));
        write_feature_bag(&bag, &bag_path)?;
        records.push(PatientRecord {
            patient_id,
            label,
            side,
            bag_path,
        });
    }

    Ok(DatasetManifest {
        records,
        split_tag: split,
    })
}

fn stream_rng(seed: u64, stream: u64) -> ChaCha20Rng {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// `n x d` patch matrix: rows are `U * z + eps`.
fn sample_patches(
    n: usize,
    basis: &Array2<f64>,
    lambdas: &[f64],
    noise_sigma: f64,
    rng: &mut ChaCha20Rng,
) -> Array2<f64> {
    let d = basis.nrows();
    let r = basis.ncols();
    let normal = StandardNormal;
    let mut coeffs = Array2::<f64>::zeros((n, r));
    for mut row in coeffs.rows_mut() {
        for (j, value) in row.iter_mut().enumerate() {
            let draw: f64 = normal.sample(rng);
            *value = draw * lambdas[j].sqrt();
        }
    }
    let mut patches = coeffs.dot(&basis.t());
    for value in patches.iter_mut() {
        let draw: f64 = normal.sample(rng);
        *value += draw * noise_sigma;
    }
    debug_assert_eq!(patches.dim(), (n, d));
    patches
}

/// Orthonormal `d x r` matrix from Gaussian draws via modified Gram-Schmidt
/// with one re-orthogonalization pass.
fn random_orthonormal(d: usize, r: usize, rng: &mut ChaCha20Rng) -> Array2<f64> {
    assert!(r <= d);
    let mut basis = Array2::<f64>::zeros((d, r));
    for j in 0..r {
        let mut v = Array1::<f64>::zeros(d);
        for value in v.iter_mut() {
            *value = StandardNormal.sample(rng);
        }
        for _ in 0..2 {
            for k in 0..j {
                let col = basis.column(k);
                let proj = col.dot(&v);
                v.scaled_add(-proj, &col.to_owned());
            }
        }
        let norm = v.dot(&v).sqrt();
        v.mapv_inplace(|x| x / norm);
        basis.column_mut(j).assign(&v);
    }
    basis
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::read_feature_bag;

    fn small_cfg() -> SynthConfig {
        SynthConfig {
            n_patients: 60,
            patches_min: 8,
            patches_max: 16,
            feature_dim: 12,
            signal_rank: 3,
            seed: 11,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn msi_count_rounds_half_away_from_zero() {
        let cfg = small_cfg();
        // round(60 * 0.18) = round(10.8) = 11
        assert_eq!(cfg.n_msi(), 11);
        let dir = tempfile::tempdir().unwrap();
        let manifest = generate_synthetic(&cfg, SplitTag::Train, dir.path()).unwrap();
        let n_msi = manifest.records.iter().filter(|r| r.label == Label::Msi).count();
        assert_eq!(n_msi, 11);
        assert_eq!(manifest.len(), 60);
    }

    #[test]
    fn generation_is_deterministic_and_byte_identical() {
        let cfg = small_cfg();
        let dir_a = tempfile::tempdir().unwrap();
        let dir_b = tempfile::tempdir().unwrap();
        let a = generate_synthetic(&cfg, SplitTag::Train, dir_a.path()).unwrap();
        let b = generate_synthetic(&cfg, SplitTag::Train, dir_b.path()).unwrap();
        for (ra, rb) in a.records.iter().zip(&b.records) {
            assert_eq!(ra.patient_id, rb.patient_id);
            assert_eq!(ra.label, rb.label);
            assert_eq!(ra.side, rb.side);
            let bytes_a = std::fs::read(&ra.bag_path).unwrap();
            let bytes_b = std::fs::read(&rb.bag_path).unwrap();
            assert_eq!(bytes_a, bytes_b);
        }
    }

    #[test]
    fn splits_share_bases_but_not_patients() {
        let cfg = small_cfg();
        let dir = tempfile::tempdir().unwrap();
        let train = generate_synthetic(&cfg, SplitTag::Train, &dir.path().join("tr")).unwrap();
        let test = generate_synthetic(&cfg, SplitTag::Test, &dir.path().join("te")).unwrap();
        let bag_tr = read_feature_bag(&train.records[0].bag_path).unwrap();
        let bag_te = read_feature_bag(&test.records[0].bag_path).unwrap();
        assert_ne!(bag_tr.features(), bag_te.features());
        assert!(test.records[0].patient_id.starts_with("synth-test-"));
    }

    #[test]
    fn bags_validate_and_have_uniform_dim() {
        let cfg = small_cfg();
        let dir = tempfile::tempdir().unwrap();
        let manifest = generate_synthetic(&cfg, SplitTag::Train, dir.path()).unwrap();
        assert_eq!(manifest.validate_bags().unwrap(), cfg.feature_dim);
    }

    #[test]
    fn side_prevalence_matches_config() {
        let cfg = SynthConfig {
            n_patients: 2000,
            patches_min: 4,
            patches_max: 6,
            feature_dim: 8,
            signal_rank: 2,
            seed: 6,
            ..SynthConfig::default()
        };
        let dir = tempfile::tempdir().unwrap();
        let manifest = generate_synthetic(&cfg, SplitTag::Train, dir.path()).unwrap();
        let msi: Vec<_> = manifest.records.iter().filter(|r| r.label == Label::Msi).collect();
        let right = msi.iter().filter(|r| r.side == Side::Right).count();
        let frac = right as f64 / msi.len() as f64;
        assert!(
            (frac - 0.87).abs() <= 0.03,
            "right-sided MSI fraction {frac} outside 0.87 +/- 0.03"
        );
    }

    #[test]
    fn signal_bases_are_orthonormal_and_seed_stable() {
        let cfg = small_cfg();
        let (msi_a, mss_a) = cfg.signal_bases();
        let (msi_b, _) = cfg.signal_bases();
        assert_eq!(msi_a, msi_b);
        let gram = msi_a.t().dot(&msi_a);
        for i in 0..gram.nrows() {
            for j in 0..gram.ncols() {
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((gram[[i, j]] - want).abs() < 1e-10);
            }
        }
        assert_ne!(msi_a, mss_a);
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let mut cfg = small_cfg();
        cfg.msi_fraction = 1.0;
        assert!(matches!(
            generate_synthetic(&cfg, SplitTag::Train, Path::new("/tmp")),
            Err(DataError::InvalidConfig(_))
        ));
        let mut cfg = small_cfg();
        cfg.signal_rank = cfg.feature_dim;
        assert!(cfg.validate().is_err());
        let mut cfg = small_cfg();
        cfg.patches_min = 1;
        assert!(cfg.validate().is_err());
    }
}
