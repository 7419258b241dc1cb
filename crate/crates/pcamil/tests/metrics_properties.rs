//! Rank-statistic and scoring invariances.

use pcamil::data::Label;
use pcamil::metrics::{average_precision, roc_auc, ScoredCohort};
use proptest::prelude::*;

fn cohort_strategy(max_n: usize) -> impl Strategy<Value = (Vec<Label>, Vec<f64>)> {
    prop::collection::vec((any::<bool>(), 0u32..=16), 2..=max_n).prop_map(|items| {
        let mut labels: Vec<Label> = items
            .iter()
            .map(|(pos, _)| if *pos { Label::Msi } else { Label::Mss })
            .collect();
        // Guarantee both classes.
        labels[0] = Label::Msi;
        let last = labels.len() - 1;
        labels[last] = Label::Mss;
        let scores = items.iter().map(|(_, q)| f64::from(*q) / 16.0).collect();
        (labels, scores)
    })
}

fn build(labels: &[Label], scores: &[f64]) -> ScoredCohort {
    let ids = (0..labels.len()).map(|i| format!("p{i}")).collect();
    ScoredCohort::new(ids, labels.to_vec(), scores.to_vec()).unwrap()
}

proptest! {
    /// AUROC is a rank statistic: any strictly increasing score transform
    /// leaves it unchanged.
    #[test]
    fn auroc_is_invariant_under_monotone_transforms((labels, scores) in cohort_strategy(16)) {
        let base = roc_auc(&build(&labels, &scores)).unwrap();
        // x -> x^2 is strictly increasing on [0,1] and preserves ties.
        let squared: Vec<f64> = scores.iter().map(|s| s * s).collect();
        let transformed = roc_auc(&build(&labels, &squared)).unwrap();
        prop_assert!((base - transformed).abs() < 1e-12);
    }

    /// Flipping every label complements the AUROC when scores are tie-free.
    #[test]
    fn auroc_complements_under_label_flip(seed in any::<u64>()) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha20Rng::seed_from_u64(seed);
        let n = rng.gen_range(4..20);
        let mut labels: Vec<Label> = (0..n)
            .map(|_| if rng.gen_bool(0.4) { Label::Msi } else { Label::Mss })
            .collect();
        labels[0] = Label::Msi;
        labels[1] = Label::Mss;
        // Distinct scores: a random permutation of distinct rationals.
        let mut scores: Vec<f64> = (0..n).map(|i| i as f64 / n as f64).collect();
        use rand::seq::SliceRandom;
        scores.shuffle(&mut rng);

        let auc = roc_auc(&build(&labels, &scores)).unwrap();
        let flipped: Vec<Label> = labels
            .iter()
            .map(|l| if l.is_positive() { Label::Mss } else { Label::Msi })
            .collect();
        let auc_flipped = roc_auc(&build(&flipped, &scores)).unwrap();
        prop_assert!((auc + auc_flipped - 1.0).abs() < 1e-12);
    }

    /// With every score tied, average precision equals prevalence exactly.
    #[test]
    fn ap_equals_prevalence_on_full_tie(n_pos in 1usize..8, n_neg in 1usize..8, q in 0u32..=16) {
        let mut labels = vec![Label::Msi; n_pos];
        labels.extend(vec![Label::Mss; n_neg]);
        let scores = vec![f64::from(q) / 16.0; n_pos + n_neg];
        let ap = average_precision(&build(&labels, &scores)).unwrap();
        let prevalence = n_pos as f64 / (n_pos + n_neg) as f64;
        prop_assert!((ap - prevalence).abs() < 1e-12);
    }

    /// AUROC stays within [0, 1] and matches the brute-force count.
    #[test]
    fn auroc_equals_bruteforce((labels, scores) in cohort_strategy(12)) {
        let auc = roc_auc(&build(&labels, &scores)).unwrap();
        let mut wins = 0.0;
        let mut pairs = 0.0;
        for i in 0..labels.len() {
            for j in 0..labels.len() {
                if labels[i].is_positive() && !labels[j].is_positive() {
                    pairs += 1.0;
                    wins += if scores[i] > scores[j] {
                        1.0
                    } else if scores[i] == scores[j] {
                        0.5
                    } else {
                        0.0
                    };
                }
            }
        }
        prop_assert_eq!(auc, wins / pairs);
    }
}
