//! The full experimental protocol: per-fold training of every enabled arm,
//! evaluation of each fold's models on the external test set, aggregation,
//! and statistical comparisons.
//!
//! Embeddings are per-patient and involve no fitting across patients, so
//! they are computed once and shared by all folds. Each fold's model draws
//! its own derived seed, which makes fold-level parallelism (capped by
//! `PCAMIL_THREADS`) bit-identical to serial execution.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use ndarray::Array2;
use serde::Serialize;

use super::report::write_all_reports;
use super::{derive_seed, fold_thread_cap, ExperimentConfig, HarnessError, Method};
use crate::data::{load_manifest, read_feature_bag, DataError, DatasetManifest, FeatureBag, Label, Side, SplitTag};
use crate::metrics::{
    aggregate_folds, average_precision, binary_report, roc_auc, FoldAggregate, MetricsError,
    ScoredCohort,
};
use crate::mil::{bag_probability, train_fold, CheckpointRule, MilConfig, TrainingHistory};
use crate::pca::{patient_embedding, EigenBasis};
use crate::prior::{apply_prior, mean_aggregate, side_only_classifier, train_patch_scorer};
use crate::stats::{mcnemar_test, paired_t_test, McNemarResult};

/// Metric values for one (method, fold) cell. The deterministic side-only
/// arm has no ranking metrics.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MethodMetrics {
    pub auroc: Option<f64>,
    pub auprc: Option<f64>,
    pub f1: f64,
    pub kappa: f64,
    pub accuracy: f64,
}

/// One method's scored test cohort for one fold.
#[derive(Debug, Clone)]
pub struct FoldReport {
    pub method: Method,
    /// `None` for the deterministic CI-CRC arm.
    pub fold: Option<usize>,
    pub cohort: ScoredCohort,
    /// Thresholded predictions (true = MSI), parallel to the cohort.
    pub predictions: Vec<bool>,
    pub metrics: MethodMetrics,
}

/// Paired t-test between two methods' per-fold values of one metric.
#[derive(Debug, Clone, Serialize)]
pub struct PairedComparison {
    pub metric: String,
    pub method_a: Method,
    pub method_b: Method,
    pub t: f64,
    pub p: f64,
    pub df: usize,
}

/// Per-fold McNemar comparison of two methods' test predictions.
#[derive(Debug, Clone, Serialize)]
pub struct McNemarComparison {
    pub method_a: Method,
    pub method_b: Method,
    pub fold: usize,
    #[serde(flatten)]
    pub result: McNemarResult,
}

/// Everything a run produces (also written to `output_dir`).
#[derive(Debug, Clone)]
pub struct ExperimentSummary {
    pub methods: Vec<Method>,
    pub n_folds: usize,
    pub fold_reports: Vec<FoldReport>,
    pub ci_crc: Option<FoldReport>,
    pub aggregates: Vec<(Method, Vec<(String, FoldAggregate)>)>,
    pub t_tests: Vec<PairedComparison>,
    pub mcnemar: Vec<McNemarComparison>,
    pub mil_histories: Vec<TrainingHistory>,
    pub test_sides: Vec<Side>,
    pub notes: Vec<String>,
}

impl ExperimentSummary {
    /// Per-fold values of a metric for one method, fold-ascending.
    pub fn metric_values(&self, method: Method, metric: &str) -> Vec<f64> {
        let mut out = Vec::new();
        for r in &self.fold_reports {
            if r.method != method {
                continue;
            }
            let v = match metric {
                "auroc" => r.metrics.auroc,
                "auprc" => r.metrics.auprc,
                "f1" => Some(r.metrics.f1),
                "kappa" => Some(r.metrics.kappa),
                "accuracy" => Some(r.metrics.accuracy),
                _ => None,
            };
            if let Some(v) = v {
                out.push(v);
            }
        }
        out
    }

    pub fn aggregate(&self, method: Method, metric: &str) -> Option<FoldAggregate> {
        self.aggregates
            .iter()
            .find(|(m, _)| *m == method)
            .and_then(|(_, metrics)| {
                metrics
                    .iter()
                    .find(|(name, _)| name == metric)
                    .map(|(_, agg)| *agg)
            })
    }

    pub fn t_test(&self, method_a: Method, method_b: Method, metric: &str) -> Option<&PairedComparison> {
        self.t_tests
            .iter()
            .find(|c| c.method_a == method_a && c.method_b == method_b && c.metric == metric)
    }
}

pub(super) struct LoadedSplit {
    pub(super) manifest: DatasetManifest,
    pub(super) bags: Vec<FeatureBag>,
    pub(super) feature_dim: usize,
}

/// Reads every bag a manifest references, enforcing the manifest-wide
/// invariants while keeping the bags for use.
fn load_split(path: &std::path::Path, split: SplitTag) -> Result<LoadedSplit, HarnessError> {
    let manifest = load_manifest(path, split)?;
    let mut bags = Vec::with_capacity(manifest.len());
    let mut dim: Option<usize> = None;
    for record in &manifest.records {
        let bag = read_feature_bag(&record.bag_path)?;
        if bag.patient_id() != record.patient_id {
            return Err(DataError::PatientIdMismatch {
                path: record.bag_path.clone(),
                expected: record.patient_id.clone(),
                found: bag.patient_id().to_string(),
            }
            .into());
        }
        match dim {
            None => dim = Some(bag.feature_dim()),
            Some(d) if d != bag.feature_dim() => {
                return Err(DataError::InconsistentFeatureDim {
                    patient_id: record.patient_id.clone(),
                    expected: d,
                    found: bag.feature_dim(),
                }
                .into());
            }
            _ => {}
        }
        bags.push(bag);
    }
    let feature_dim = dim.ok_or(DataError::EmptyManifest)?;
    Ok(LoadedSplit {
        manifest,
        bags,
        feature_dim,
    })
}

/// Loads the training split only; the sweep path goes through here so it
/// cannot see a test manifest.
pub(super) fn load_training_split(cfg: &ExperimentConfig) -> Result<LoadedSplit, HarnessError> {
    load_split(&cfg.train_manifest, SplitTag::Train)
}

struct FoldOutput {
    mil_scores: Option<Vec<f64>>,
    baseline_scores: Option<Vec<f64>>,
    history: Option<TrainingHistory>,
}

struct FoldContext<'a> {
    cfg: &'a ExperimentConfig,
    mil_cfg: &'a MilConfig,
    fold_masks: &'a [Vec<bool>],
    train_labels: &'a [Label],
    train_bags: &'a [FeatureBag],
    train_embeddings: &'a [EigenBasis],
    test_bags: &'a [FeatureBag],
    test_embeddings: &'a [EigenBasis],
    need_mil: bool,
    need_baseline: bool,
}

fn compute_fold(ctx: &FoldContext<'_>, fold: usize) -> Result<FoldOutput, HarnessError> {
    let held = &ctx.fold_masks[fold];
    let train_idx: Vec<usize> = (0..ctx.train_labels.len()).filter(|&i| !held[i]).collect();

    let (mil_scores, history) = if ctx.need_mil {
        let bags: Vec<(EigenBasis, Label)> = train_idx
            .iter()
            .map(|&i| (ctx.train_embeddings[i].clone(), ctx.train_labels[i]))
            .collect();
        let fold_cfg = MilConfig {
            seed: derive_seed(ctx.cfg.seed, 1000 + fold as u64),
            ..ctx.mil_cfg.clone()
        };
        let (params, history) = train_fold(&bags, &fold_cfg, &CheckpointRule::default())?;
        let mut scores = Vec::with_capacity(ctx.test_embeddings.len());
        for basis in ctx.test_embeddings {
            let instances = basis.instances(fold_cfg.scale_instances_by_eigenvalue);
            scores.push(bag_probability(&params, &instances)?.p);
        }
        (Some(scores), Some(history))
    } else {
        (None, None)
    };

    let baseline_scores = if ctx.need_baseline {
        let n_patches: usize = train_idx.iter().map(|&i| ctx.train_bags[i].n_patches()).sum();
        let d = ctx.train_bags[0].feature_dim();
        let mut patches = Array2::<f64>::zeros((n_patches, d));
        let mut patch_labels = Vec::with_capacity(n_patches);
        let mut row = 0;
        for &i in &train_idx {
            let features = ctx.train_bags[i].features_f64();
            for patch in features.rows() {
                patches.row_mut(row).assign(&patch);
                patch_labels.push(ctx.train_labels[i]);
                row += 1;
            }
        }
        let scorer = train_patch_scorer(
            &patches,
            &patch_labels,
            ctx.cfg.scorer_epochs,
            ctx.cfg.scorer_lr,
            derive_seed(ctx.cfg.seed, 2000 + fold as u64),
        )?;
        let mut scores = Vec::with_capacity(ctx.test_bags.len());
        for bag in ctx.test_bags {
            let patch_probs = scorer.score_bag(&bag.features_f64());
            scores.push(mean_aggregate(&patch_probs)?);
        }
        Some(scores)
    } else {
        None
    };

    Ok(FoldOutput {
        mil_scores,
        baseline_scores,
        history,
    })
}

/// Runs the configured experiment and writes `fold_metrics.csv`,
/// `scores.csv`, per-fold training histories, and `summary.json` under
/// `output_dir`. On a fold failure, completed folds are flushed alongside a
/// `failure.txt` marker before the error propagates.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentSummary, HarnessError> {
    cfg.validate()?;
    let methods = cfg.ordered_methods();
    let need_mil = methods.contains(&Method::MilCrc) || methods.contains(&Method::CimilCrc);
    let need_baseline =
        methods.contains(&Method::Baseline) || methods.contains(&Method::CiBaseline);
    let need_folds = need_mil || need_baseline;

    let train = load_split(&cfg.train_manifest, SplitTag::Train)?;
    let test = load_split(&cfg.test_manifest, SplitTag::Test)?;
    if train.feature_dim != test.feature_dim {
        return Err(DataError::InconsistentFeatureDim {
            patient_id: test.manifest.records[0].patient_id.clone(),
            expected: train.feature_dim,
            found: test.feature_dim,
        }
        .into());
    }
    let test_labels = test.manifest.labels();
    if !test_labels.iter().any(|l| l.is_positive())
        || test_labels.iter().all(|l| l.is_positive())
    {
        return Err(MetricsError::SingleClassCohort.into());
    }

    let mut mil_cfg = cfg.mil.clone();
    if mil_cfg.d_in == 0 {
        mil_cfg.d_in = train.feature_dim;
    } else if mil_cfg.d_in != train.feature_dim {
        return Err(HarnessError::InvalidConfig(format!(
            "mil.d_in {} does not match the dataset's feature dim {}",
            mil_cfg.d_in, train.feature_dim
        )));
    }
    mil_cfg.label_smoothing = cfg.alpha;
    mil_cfg.validate()?;

    let train_labels = train.manifest.labels();
    let test_sides: Vec<Side> = test.manifest.records.iter().map(|r| r.side).collect();
    let test_ids: Vec<String> = test
        .manifest
        .records
        .iter()
        .map(|r| r.patient_id.clone())
        .collect();

    // Embeddings are training-independent, so one pass serves all folds.
    let (train_embeddings, test_embeddings) = if need_mil {
        let embed = |bags: &[FeatureBag]| -> Result<Vec<EigenBasis>, HarnessError> {
            bags.iter()
                .map(|b| {
                    patient_embedding(b, cfg.k_eigenvectors, cfg.eps_rank).map_err(Into::into)
                })
                .collect()
        };
        (embed(&train.bags)?, embed(&test.bags)?)
    } else {
        (Vec::new(), Vec::new())
    };

    let mut fold_outputs: Vec<Option<FoldOutput>> = Vec::new();
    let mut failure: Option<(usize, HarnessError)> = None;

    if need_folds {
        let folds = super::stratified_kfold(&train_labels, cfg.n_folds, cfg.seed)?;
        let fold_masks: Vec<Vec<bool>> = folds
            .iter()
            .map(|fold| {
                let mut mask = vec![false; train_labels.len()];
                for &i in fold {
                    mask[i] = true;
                }
                mask
            })
            .collect();
        let ctx = FoldContext {
            cfg,
            mil_cfg: &mil_cfg,
            fold_masks: &fold_masks,
            train_labels: &train_labels,
            train_bags: &train.bags,
            train_embeddings: &train_embeddings,
            test_bags: &test.bags,
            test_embeddings: &test_embeddings,
            need_mil,
            need_baseline,
        };

        let threads = fold_thread_cap().min(cfg.n_folds);
        let results: Mutex<Vec<Option<Result<FoldOutput, HarnessError>>>> =
            Mutex::new((0..cfg.n_folds).map(|_| None).collect());
        if threads <= 1 {
            for fold in 0..cfg.n_folds {
                let out = compute_fold(&ctx, fold);
                results.lock().unwrap()[fold] = Some(out);
            }
        } else {
            let next = AtomicUsize::new(0);
            std::thread::scope(|scope| {
                for _ in 0..threads {
                    scope.spawn(|| loop {
                        let fold = next.fetch_add(1, Ordering::SeqCst);
                        if fold >= cfg.n_folds {
                            break;
                        }
                        let out = compute_fold(&ctx, fold);
                        results.lock().unwrap()[fold] = Some(out);
                    });
                }
            });
        }

        for (fold, slot) in results.into_inner().unwrap().into_iter().enumerate() {
            match slot {
                Some(Ok(out)) => fold_outputs.push(Some(out)),
                Some(Err(err)) => {
                    if failure.is_none() {
                        failure = Some((fold, err));
                    }
                    fold_outputs.push(None);
                }
                None => unreachable!("every fold is visited"),
            }
        }
    }

    // Assemble per-(method, fold) reports for the folds that completed.
    let mut fold_reports = Vec::new();
    let mut mil_histories = Vec::new();
    for method in &methods {
        if !method.is_fold_based() {
            continue;
        }
        for (fold, output) in fold_outputs.iter().enumerate() {
            let Some(output) = output else { continue };
            let raw = match method {
                Method::Baseline | Method::CiBaseline => {
                    output.baseline_scores.as_ref().expect("baseline computed")
                }
                Method::MilCrc | Method::CimilCrc => {
                    output.mil_scores.as_ref().expect("mil computed")
                }
                Method::CiCrc => unreachable!(),
            };
            let with_prior = matches!(method, Method::CiBaseline | Method::CimilCrc);
            let scores: Vec<f64> = raw
                .iter()
                .zip(&test_sides)
                .map(|(&p, &side)| {
                    if with_prior {
                        apply_prior(p, side, &cfg.prior)
                    } else {
                        p
                    }
                })
                .collect();
            let cohort = ScoredCohort::new(test_ids.clone(), test_labels.clone(), scores)?;
            let predictions: Vec<bool> =
                cohort.scores().iter().map(|&s| s >= cfg.threshold).collect();
            let report = binary_report(&cohort, cfg.threshold);
            let metrics = MethodMetrics {
                auroc: Some(roc_auc(&cohort)?),
                auprc: Some(average_precision(&cohort)?),
                f1: report.f1,
                kappa: report.kappa,
                accuracy: report.accuracy,
            };
            fold_reports.push(FoldReport {
                method: *method,
                fold: Some(fold),
                cohort,
                predictions,
                metrics,
            });
        }
    }
    for output in fold_outputs.iter().flatten() {
        if let Some(history) = &output.history {
            mil_histories.push(history.clone());
        }
    }

    // Deterministic side-only arm, evaluated once on the test set.
    let ci_crc = if methods.contains(&Method::CiCrc) {
        let predictions: Vec<bool> = test_sides
            .iter()
            .map(|&s| side_only_classifier(s).is_positive())
            .collect();
        let scores: Vec<f64> = predictions.iter().map(|&p| if p { 1.0 } else { 0.0 }).collect();
        let cohort = ScoredCohort::new(test_ids.clone(), test_labels.clone(), scores)?;
        let report = binary_report(&cohort, 0.5);
        Some(FoldReport {
            method: Method::CiCrc,
            fold: None,
            metrics: MethodMetrics {
                auroc: None,
                auprc: None,
                f1: report.f1,
                kappa: report.kappa,
                accuracy: report.accuracy,
            },
            cohort,
            predictions,
        })
    } else {
        None
    };

    let completed_all = failure.is_none();
    let (aggregates, t_tests, mcnemar) = if completed_all && need_folds {
        summarize(&methods, &fold_reports, cfg.n_folds)?
    } else {
        (Vec::new(), Vec::new(), Vec::new())
    };

    let mut notes = vec![
        "AUPRC is average precision with tie-grouped blocks".to_string(),
        "confidence intervals are t-based over folds, clipped to the metric range".to_string(),
        format!(
            "thresholded metrics use {} on the final (post-prior) score",
            cfg.threshold
        ),
        "undefined tumor side takes the right-side branch of the prior".to_string(),
    ];
    let fallback_folds: Vec<String> = mil_histories
        .iter()
        .enumerate()
        .filter(|(_, h)| h.checkpoint_epoch.is_none())
        .map(|(f, _)| f.to_string())
        .collect();
    if !fallback_folds.is_empty() {
        notes.push(format!(
            "checkpoint rule never fired in folds [{}]; final-epoch parameters used",
            fallback_folds.join(", ")
        ));
    }

    let summary = ExperimentSummary {
        methods: methods.clone(),
        n_folds: cfg.n_folds,
        fold_reports,
        ci_crc,
        aggregates,
        t_tests,
        mcnemar,
        mil_histories,
        test_sides,
        notes,
    };

    std::fs::create_dir_all(&cfg.output_dir)?;
    write_all_reports(cfg, &summary, completed_all)?;
    if let Some((fold, err)) = failure {
        let marker = cfg.output_dir.join("failure.txt");
        std::fs::write(&marker, format!("fold {fold} failed: {err}\n"))?;
        return Err(HarnessError::FoldFailed {
            fold,
            source: Box::new(err),
        });
    }
    Ok(summary)
}

type SummaryTables = (
    Vec<(Method, Vec<(String, FoldAggregate)>)>,
    Vec<PairedComparison>,
    Vec<McNemarComparison>,
);

/// Aggregates per-fold metrics and runs the paired comparisons for every
/// enabled pair: MIL-CRC vs Baseline, CIMIL-CRC vs CI-Baseline, and
/// CIMIL-CRC vs MIL-CRC.
pub(super) fn summarize(
    methods: &[Method],
    fold_reports: &[FoldReport],
    n_folds: usize,
) -> Result<SummaryTables, HarnessError> {
    let metric_names = ["auroc", "auprc", "f1", "kappa", "accuracy"];
    let values = |method: Method, metric: &str| -> Vec<f64> {
        fold_reports
            .iter()
            .filter(|r| r.method == method)
            .filter_map(|r| match metric {
                "auroc" => r.metrics.auroc,
                "auprc" => r.metrics.auprc,
                "f1" => Some(r.metrics.f1),
                "kappa" => Some(r.metrics.kappa),
                "accuracy" => Some(r.metrics.accuracy),
                _ => None,
            })
            .collect()
    };

    let mut aggregates = Vec::new();
    for &method in methods.iter().filter(|m| m.is_fold_based()) {
        let mut per_metric = Vec::new();
        for name in metric_names {
            let vals = values(method, name);
            if vals.len() == n_folds {
                let clip = if name == "kappa" { (-1.0, 1.0) } else { (0.0, 1.0) };
                per_metric.push((name.to_string(), aggregate_folds(&vals, Some(clip))?));
            }
        }
        aggregates.push((method, per_metric));
    }

    const PAIRS: [(Method, Method); 3] = [
        (Method::MilCrc, Method::Baseline),
        (Method::CimilCrc, Method::CiBaseline),
        (Method::CimilCrc, Method::MilCrc),
    ];
    let mut t_tests = Vec::new();
    let mut mcnemar = Vec::new();
    for (a, b) in PAIRS {
        if !methods.contains(&a) || !methods.contains(&b) {
            continue;
        }
        for metric in ["auroc", "auprc"] {
            let va = values(a, metric);
            let vb = values(b, metric);
            if va.len() == n_folds && vb.len() == n_folds {
                let r = paired_t_test(&va, &vb)?;
                t_tests.push(PairedComparison {
                    metric: metric.to_string(),
                    method_a: a,
                    method_b: b,
                    t: r.t,
                    p: r.p,
                    df: r.df,
                });
            }
        }
        for fold in 0..n_folds {
            let find = |m: Method| {
                fold_reports
                    .iter()
                    .find(|r| r.method == m && r.fold == Some(fold))
            };
            if let (Some(ra), Some(rb)) = (find(a), find(b)) {
                let correct =
                    |r: &FoldReport| -> Vec<bool> {
                        r.predictions
                            .iter()
                            .zip(r.cohort.labels())
                            .map(|(&pred, label)| pred == label.is_positive())
                            .collect()
                    };
                let result = mcnemar_test(&correct(ra), &correct(rb))?;
                mcnemar.push(McNemarComparison {
                    method_a: a,
                    method_b: b,
                    fold,
                    result,
                });
            }
        }
    }
    Ok((aggregates, t_tests, mcnemar))
}
