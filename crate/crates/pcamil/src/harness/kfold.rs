//! Stratified k-fold partitioning.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

use super::HarnessError;
use crate::data::Label;

/// Partitions indices into `n_folds` stratified folds: per class the
/// (seeded, shuffled) members are dealt round-robin, with each class's
/// dealing offset continuing where the previous class stopped so fold sizes
/// stay within one of each other. A pure function of (labels, n_folds,
/// seed); fold members are returned sorted.
pub fn stratified_kfold(
    labels: &[Label],
    n_folds: usize,
    seed: u64,
) -> Result<Vec<Vec<usize>>, HarnessError> {
    if n_folds < 2 {
        return Err(HarnessError::InvalidConfig(format!(
            "n_folds {n_folds} must be at least 2"
        )));
    }
    for class in [Label::Msi, Label::Mss] {
        let count = labels.iter().filter(|&&l| l == class).count();
        if count < n_folds {
            return Err(HarnessError::TooFewPerClass {
                class: class.to_string(),
                count,
                folds: n_folds,
            });
        }
    }

    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut folds = vec![Vec::new(); n_folds];
    let mut offset = 0usize;
    for class in [Label::Msi, Label::Mss] {
        let mut members: Vec<usize> = labels
            .iter()
            .enumerate()
            .filter(|(_, &l)| l == class)
            .map(|(i, _)| i)
            .collect();
        members.shuffle(&mut rng);
        for (pos, idx) in members.iter().enumerate() {
            folds[(offset + pos) % n_folds].push(*idx);
        }
        offset = (offset + members.len()) % n_folds;
    }
    for fold in &mut folds {
        fold.sort_unstable();
    }
    Ok(folds)
}
