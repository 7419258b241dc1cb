//! Report emission and re-aggregation.
//!
//! Reports avoid timestamps and absolute paths, so a rerun with the same
//! config produces byte-identical files. The deterministic CI-CRC arm is
//! written with `-` in the fold column and empty ranking-metric cells.

use std::collections::BTreeMap;
use std::path::Path;

use serde::Serialize;

use super::experiment::{ExperimentSummary, FoldReport, McNemarComparison, PairedComparison};
use super::{ExperimentConfig, HarnessError, Method};
use crate::data::{DataError, Label};
use crate::metrics::FoldAggregate;
use crate::mil::write_history;
use crate::stats::{mcnemar_test, paired_t_test};

pub(super) const FOLD_METRICS_FILE: &str = "fold_metrics.csv";
pub(super) const SCORES_FILE: &str = "scores.csv";
pub(super) const SUMMARY_FILE: &str = "summary.json";

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|v| format!("{v:.6}")).unwrap_or_default()
}

pub(super) fn write_all_reports(
    cfg: &ExperimentConfig,
    summary: &ExperimentSummary,
    completed: bool,
) -> Result<(), HarnessError> {
    let dir = &cfg.output_dir;
    write_fold_metrics(summary, &dir.join(FOLD_METRICS_FILE))?;
    write_scores(summary, &dir.join(SCORES_FILE))?;
    if !summary.mil_histories.is_empty() {
        let hist_dir = dir.join("history");
        std::fs::create_dir_all(&hist_dir)?;
        for (fold, history) in summary.mil_histories.iter().enumerate() {
            write_history(history, &hist_dir.join(format!("fold{fold}_history.csv")))?;
        }
    }
    if completed {
        write_summary_json(cfg, summary, &dir.join(SUMMARY_FILE))?;
    }
    Ok(())
}

fn write_fold_metrics(summary: &ExperimentSummary, path: &Path) -> Result<(), HarnessError> {
    let mut out = String::from("method,fold,auroc,auprc,f1,kappa,accuracy\n");
    let mut rows: Vec<&FoldReport> = summary.fold_reports.iter().collect();
    if let Some(ci) = &summary.ci_crc {
        rows.push(ci);
    }
    rows.sort_by_key(|r| (method_rank(r.method), r.fold.unwrap_or(0)));
    for r in rows {
        let fold = r.fold.map(|f| f.to_string()).unwrap_or_else(|| "-".into());
        out.push_str(&format!(
            "{},{},{},{},{:.6},{:.6},{:.6}\n",
            r.method,
            fold,
            fmt_opt(r.metrics.auroc),
            fmt_opt(r.metrics.auprc),
            r.metrics.f1,
            r.metrics.kappa,
            r.metrics.accuracy
        ));
    }
    std::fs::write(path, out).map_err(HarnessError::Io)
}

fn method_rank(m: Method) -> usize {
    Method::ALL.iter().position(|&x| x == m).expect("known method")
}

fn write_scores(summary: &ExperimentSummary, path: &Path) -> Result<(), HarnessError> {
    let mut out = String::from("method,fold,patient_id,label,side,score,predicted\n");
    let mut rows: Vec<&FoldReport> = summary.fold_reports.iter().collect();
    if let Some(ci) = &summary.ci_crc {
        rows.push(ci);
    }
    rows.sort_by_key(|r| (method_rank(r.method), r.fold.unwrap_or(0)));
    for r in rows {
        let fold = r.fold.map(|f| f.to_string()).unwrap_or_else(|| "-".into());
        for (i, id) in r.cohort.patient_ids().iter().enumerate() {
            let label = r.cohort.labels()[i];
            let predicted = if r.predictions[i] { Label::Msi } else { Label::Mss };
            out.push_str(&format!(
                "{},{},{},{},{},{:.9},{}\n",
                r.method, fold, id, label, summary.test_sides[i], r.cohort.scores()[i], predicted
            ));
        }
    }
    std::fs::write(path, out).map_err(HarnessError::Io)
}

#[derive(Serialize)]
struct ConfigEcho<'a> {
    n_folds: usize,
    k_eigenvectors: usize,
    alpha: f64,
    eps_rank: f64,
    prior: &'a crate::prior::PriorConfig,
    mil: &'a crate::mil::MilConfig,
    methods: Vec<String>,
    scorer_epochs: usize,
    scorer_lr: f64,
    threshold: f64,
    seed: u64,
}

#[derive(Serialize)]
struct CiCrcJson {
    f1: f64,
    kappa: f64,
    accuracy: f64,
}

#[derive(Serialize)]
struct SummaryJson<'a> {
    config: ConfigEcho<'a>,
    aggregates: BTreeMap<String, BTreeMap<String, FoldAggregate>>,
    paired_t_tests: &'a [PairedComparison],
    mcnemar_tests: &'a [McNemarComparison],
    ci_crc: Option<CiCrcJson>,
    mil_checkpoint_epochs: Vec<Option<usize>>,
    notes: &'a [String],
}

/// Writes `summary.json`: config echo (paths omitted so reruns in different
/// directories stay comparable), aggregates, test outcomes, and notes.
pub fn write_summary_json(
    cfg: &ExperimentConfig,
    summary: &ExperimentSummary,
    path: &Path,
) -> Result<(), HarnessError> {
    let mut aggregates = BTreeMap::new();
    for (method, metrics) in &summary.aggregates {
        let per: BTreeMap<String, FoldAggregate> = metrics.iter().cloned().collect();
        aggregates.insert(method.to_string(), per);
    }
    let json = SummaryJson {
        config: ConfigEcho {
            n_folds: cfg.n_folds,
            k_eigenvectors: cfg.k_eigenvectors,
            alpha: cfg.alpha,
            eps_rank: cfg.eps_rank,
            prior: &cfg.prior,
            mil: &cfg.mil,
            methods: summary.methods.iter().map(|m| m.to_string()).collect(),
            scorer_epochs: cfg.scorer_epochs,
            scorer_lr: cfg.scorer_lr,
            threshold: cfg.threshold,
            seed: cfg.seed,
        },
        aggregates,
        paired_t_tests: &summary.t_tests,
        mcnemar_tests: &summary.mcnemar,
        ci_crc: summary.ci_crc.as_ref().map(|r| CiCrcJson {
            f1: r.metrics.f1,
            kappa: r.metrics.kappa,
            accuracy: r.metrics.accuracy,
        }),
        mil_checkpoint_epochs: summary
            .mil_histories
            .iter()
            .map(|h| h.checkpoint_epoch)
            .collect(),
        notes: &summary.notes,
    };
    let text = serde_json::to_string_pretty(&json)
        .map_err(|e| HarnessError::InvalidConfig(e.to_string()))?;
    std::fs::write(path, text + "\n").map_err(HarnessError::Io)
}

/// Rebuilds `summary.json` from the fold CSVs in `dir`: aggregates and
/// paired t-tests from `fold_metrics.csv`, per-fold McNemar tests from
/// `scores.csv` when present.
pub fn reaggregate_reports(dir: &Path) -> Result<(), HarnessError> {
    let metrics_path = dir.join(FOLD_METRICS_FILE);
    let text = std::fs::read_to_string(&metrics_path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => HarnessError::Data(DataError::MissingFile(metrics_path)),
        _ => HarnessError::Io(e),
    })?;

    // method -> fold -> metrics
    let mut per_fold: BTreeMap<Method, BTreeMap<usize, Vec<(String, Option<f64>)>>> =
        BTreeMap::new();
    let mut ci_crc: Option<CiCrcJson> = None;
    let mut n_folds = 0usize;
    for (line_no, line) in text.lines().enumerate().skip(1) {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 7 {
            return Err(HarnessError::Data(DataError::MalformedRow {
                line: line_no as u64 + 1,
            }));
        }
        let method = Method::parse(fields[0]).ok_or_else(|| {
            HarnessError::InvalidConfig(format!("unknown method {:?}", fields[0]))
        })?;
        let parse = |s: &str| -> Option<f64> { s.parse::<f64>().ok() };
        if fields[1] == "-" {
            ci_crc = Some(CiCrcJson {
                f1: parse(fields[4]).unwrap_or(0.0),
                kappa: parse(fields[5]).unwrap_or(0.0),
                accuracy: parse(fields[6]).unwrap_or(0.0),
            });
            continue;
        }
        let fold: usize = fields[1].parse().map_err(|_| {
            HarnessError::Data(DataError::MalformedRow {
                line: line_no as u64 + 1,
            })
        })?;
        n_folds = n_folds.max(fold + 1);
        per_fold.entry(method).or_default().insert(
            fold,
            vec![
                ("auroc".to_string(), parse(fields[2])),
                ("auprc".to_string(), parse(fields[3])),
                ("f1".to_string(), parse(fields[4])),
                ("kappa".to_string(), parse(fields[5])),
                ("accuracy".to_string(), parse(fields[6])),
            ],
        );
    }

    let values = |method: Method, metric: &str| -> Vec<f64> {
        per_fold
            .get(&method)
            .map(|folds| {
                folds
                    .values()
                    .filter_map(|metrics| {
                        metrics
                            .iter()
                            .find(|(name, _)| name == metric)
                            .and_then(|(_, v)| *v)
                    })
                    .collect()
            })
            .unwrap_or_default()
    };

    let mut aggregates = BTreeMap::new();
    for (&method, folds) in &per_fold {
        let mut per: BTreeMap<String, FoldAggregate> = BTreeMap::new();
        for metric in ["auroc", "auprc", "f1", "kappa", "accuracy"] {
            let vals = values(method, metric);
            if vals.len() == folds.len() && vals.len() >= 2 {
                let clip = if metric == "kappa" { (-1.0, 1.0) } else { (0.0, 1.0) };
                per.insert(
                    metric.to_string(),
                    crate::metrics::aggregate_folds(&vals, Some(clip))?,
                );
            }
        }
        aggregates.insert(method.to_string(), per);
    }

    let mut t_tests = Vec::new();
    for (a, b) in [
        (Method::MilCrc, Method::Baseline),
        (Method::CimilCrc, Method::CiBaseline),
        (Method::CimilCrc, Method::MilCrc),
    ] {
        for metric in ["auroc", "auprc"] {
            let va = values(a, metric);
            let vb = values(b, metric);
            if !va.is_empty() && va.len() == vb.len() && va.len() >= 2 {
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
    }

    let mcnemar = match read_scores(&dir.join(SCORES_FILE)) {
        Ok(scored) => mcnemar_from_scores(&scored, n_folds)?,
        Err(_) => Vec::new(),
    };

    #[derive(Serialize)]
    struct Reaggregated<'a> {
        aggregates: &'a BTreeMap<String, BTreeMap<String, FoldAggregate>>,
        paired_t_tests: &'a [PairedComparison],
        mcnemar_tests: &'a [McNemarComparison],
        ci_crc: &'a Option<CiCrcJson>,
        notes: [&'a str; 1],
    }
    let json = Reaggregated {
        aggregates: &aggregates,
        paired_t_tests: &t_tests,
        mcnemar_tests: &mcnemar,
        ci_crc: &ci_crc,
        notes: ["re-aggregated from fold CSVs; values carry CSV rounding"],
    };
    let text = serde_json::to_string_pretty(&json)
        .map_err(|e| HarnessError::InvalidConfig(e.to_string()))?;
    std::fs::write(dir.join(SUMMARY_FILE), text + "\n").map_err(HarnessError::Io)
}

type ScoreRows = BTreeMap<(Method, usize), (Vec<Label>, Vec<bool>)>;

fn read_scores(path: &Path) -> Result<ScoreRows, HarnessError> {
    let text = std::fs::read_to_string(path).map_err(HarnessError::Io)?;
    let mut rows: ScoreRows = BTreeMap::new();
    for (line_no, line) in text.lines().enumerate().skip(1) {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 7 {
            return Err(HarnessError::Data(DataError::MalformedRow {
                line: line_no as u64 + 1,
            }));
        }
        let Some(method) = Method::parse(fields[0]) else {
            continue;
        };
        if fields[1] == "-" {
            continue;
        }
        let fold: usize = fields[1].parse().map_err(|_| {
            HarnessError::Data(DataError::MalformedRow {
                line: line_no as u64 + 1,
            })
        })?;
        let label = Label::parse(fields[3]).ok_or(HarnessError::Data(DataError::UnknownLabel {
            value: fields[3].into(),
            line: line_no as u64 + 1,
        }))?;
        let predicted = Label::parse(fields[6]).ok_or(HarnessError::Data(
            DataError::UnknownLabel {
                value: fields[6].into(),
                line: line_no as u64 + 1,
            },
        ))?;
        let entry = rows.entry((method, fold)).or_default();
        entry.0.push(label);
        entry.1.push(predicted.is_positive());
    }
    Ok(rows)
}

fn mcnemar_from_scores(
    rows: &ScoreRows,
    n_folds: usize,
) -> Result<Vec<McNemarComparison>, HarnessError> {
    let mut out = Vec::new();
    for (a, b) in [
        (Method::MilCrc, Method::Baseline),
        (Method::CimilCrc, Method::CiBaseline),
        (Method::CimilCrc, Method::MilCrc),
    ] {
        for fold in 0..n_folds {
            let (Some((labels_a, preds_a)), Some((labels_b, preds_b))) =
                (rows.get(&(a, fold)), rows.get(&(b, fold)))
            else {
                continue;
            };
            let correct_a: Vec<bool> = preds_a
                .iter()
                .zip(labels_a)
                .map(|(&p, l)| p == l.is_positive())
                .collect();
            let correct_b: Vec<bool> = preds_b
                .iter()
                .zip(labels_b)
                .map(|(&p, l)| p == l.is_positive())
                .collect();
            let result = mcnemar_test(&correct_a, &correct_b)?;
            out.push(McNemarComparison {
                method_a: a,
                method_b: b,
                fold,
                result,
            });
        }
    }
    Ok(out)
}
