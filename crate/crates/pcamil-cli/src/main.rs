//! Command-line front end: synthesize datasets, precompute embeddings,
//! debug-train a single fold, run the full experiment, sweep
//! hyperparameters, and re-aggregate reports.
//!
//! Exit codes: 0 success, 2 invalid config/usage, 3 data error,
//! 4 numerical failure.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use pcamil::data::{
    generate_synthetic, load_manifest, read_feature_bag, save_manifest, SplitTag, SynthConfig,
};
use pcamil::harness::{
    hyperparameter_sweep, reaggregate_reports, run_experiment, stratified_kfold, write_sweep_csv,
    ExperimentConfig, HarnessError, Method, SweepAxis,
};
use pcamil::mil::{save_checkpoint, train_fold, write_history, CheckpointRule, MilConfig};
use pcamil::pca::{patient_embedding, write_eigenbasis, EigenBasis};

#[derive(Parser)]
#[command(
    name = "pcamil",
    about = "PCA-based multiple-instance learning for MSI/MSS bag classification",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic train/test dataset of feature bags.
    Synth(SynthArgs),
    /// Compute and cache per-patient eigenvector embeddings.
    Embed(EmbedArgs),
    /// Train one fold's MIL model (debugging aid).
    Train(TrainArgs),
    /// Run the full cross-validation experiment.
    Run(RunArgs),
    /// Sweep one hyperparameter over the validation folds.
    Sweep(SweepArgs),
    /// Re-aggregate summary.json from existing fold CSVs.
    Report(ReportArgs),
}

#[derive(Args)]
struct SynthArgs {
    /// Directory receiving train/ and test/ subdirectories plus manifests.
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long, default_value_t = 260)]
    n_train: usize,
    #[arg(long, default_value_t = 100)]
    n_test: usize,
    /// MSI fraction of the training split.
    #[arg(long, default_value_t = 0.18)]
    train_msi_fraction: f64,
    /// MSI fraction of the test split.
    #[arg(long, default_value_t = 0.26)]
    test_msi_fraction: f64,
    #[arg(long)]
    patches_min: Option<usize>,
    #[arg(long)]
    patches_max: Option<usize>,
    #[arg(long)]
    feature_dim: Option<usize>,
    #[arg(long)]
    signal_rank: Option<usize>,
    #[arg(long)]
    noise_sigma: Option<f64>,
    #[arg(long)]
    p_right_given_msi: Option<f64>,
    #[arg(long)]
    p_right_given_mss: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct EmbedArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long, default_value_t = 90)]
    k: usize,
    #[arg(long, default_value_t = pcamil::pca::DEFAULT_EPS_RANK)]
    eps_rank: f64,
    /// Directory for the .mile cache files.
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Args)]
struct ConfigArgs {
    /// JSON config file; CLI flags override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    train_manifest: Option<PathBuf>,
    #[arg(long)]
    test_manifest: Option<PathBuf>,
    #[arg(long)]
    output_dir: Option<PathBuf>,
    #[arg(long)]
    n_folds: Option<usize>,
    #[arg(long)]
    k_eigenvectors: Option<usize>,
    /// Label smoothing rate.
    #[arg(long)]
    alpha: Option<f64>,
    /// Right/undefined side prior weight.
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    left_weight: Option<f64>,
    /// Comma-separated subset of Baseline,CI-Baseline,CI-CRC,MIL-CRC,CIMIL-CRC.
    #[arg(long, value_delimiter = ',')]
    methods: Option<Vec<String>>,
    #[arg(long)]
    threshold: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    d_hidden: Option<usize>,
    #[arg(long)]
    d_att: Option<usize>,
    #[arg(long)]
    n_heads: Option<usize>,
    #[arg(long)]
    scorer_epochs: Option<usize>,
    #[arg(long)]
    scorer_lr: Option<f64>,
    /// Scale eigenvector instances by sqrt(eigenvalue).
    #[arg(long)]
    scale_by_eigenvalue: bool,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Which fold's model to train.
    #[arg(long, default_value_t = 0)]
    fold: usize,
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    config: ConfigArgs,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// One of k_eigenvectors, alpha, beta.
    #[arg(long)]
    axis: String,
    /// Comma-separated values to sweep.
    #[arg(long, value_delimiter = ',')]
    values: Vec<f64>,
    /// Output CSV (default: <output_dir>/sweep_<axis>.csv).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ReportArgs {
    #[arg(long)]
    output_dir: PathBuf,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Synth(args) => cmd_synth(args),
        Command::Embed(args) => cmd_embed(args),
        Command::Train(args) => cmd_train(args),
        Command::Run(args) => cmd_run(args),
        Command::Sweep(args) => cmd_sweep(args),
        Command::Report(args) => cmd_report(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(err.exit_code() as u8)
        }
    }
}

fn cmd_synth(args: SynthArgs) -> Result<(), HarnessError> {
    let mut base = SynthConfig {
        n_patients: args.n_train,
        msi_fraction: args.train_msi_fraction,
        ..SynthConfig::default()
    };
    if let Some(v) = args.patches_min {
        base.patches_min = v;
    }
    if let Some(v) = args.patches_max {
        base.patches_max = v;
    }
    if let Some(v) = args.feature_dim {
        base.feature_dim = v;
    }
    if let Some(v) = args.signal_rank {
        base.signal_rank = v;
    }
    if let Some(v) = args.noise_sigma {
        base.noise_sigma = v;
    }
    if let Some(v) = args.p_right_given_msi {
        base.p_right_given_msi = v;
    }
    if let Some(v) = args.p_right_given_mss {
        base.p_right_given_mss = v;
    }
    if let Some(v) = args.seed {
        base.seed = v;
    }

    let train_dir = args.out_dir.join("train");
    let train = generate_synthetic(&base, SplitTag::Train, &train_dir)?;
    let train_csv = args.out_dir.join("train_manifest.csv");
    save_manifest(&train, &train_csv)?;

    let test_cfg = SynthConfig {
        n_patients: args.n_test,
        msi_fraction: args.test_msi_fraction,
        ..base
    };
    let test_dir = args.out_dir.join("test");
    let test = generate_synthetic(&test_cfg, SplitTag::Test, &test_dir)?;
    let test_csv = args.out_dir.join("test_manifest.csv");
    save_manifest(&test, &test_csv)?;

    println!(
        "wrote {} train and {} test patients under {}",
        train.len(),
        test.len(),
        args.out_dir.display()
    );
    println!("train manifest: {}", train_csv.display());
    println!("test manifest:  {}", test_csv.display());
    Ok(())
}

fn cmd_embed(args: EmbedArgs) -> Result<(), HarnessError> {
    let manifest = load_manifest(&args.manifest, SplitTag::Train)?;
    std::fs::create_dir_all(&args.out_dir)?;
    for record in &manifest.records {
        let bag = read_feature_bag(&record.bag_path)?;
        let basis = patient_embedding(&bag, args.k, args.eps_rank)?;
        let path = args.out_dir.join(format!("{}.mile", record.patient_id));
        write_eigenbasis(&basis, &path)?;
    }
    println!(
        "cached {} embeddings (k = {}) under {}",
        manifest.len(),
        args.k,
        args.out_dir.display()
    );
    Ok(())
}

fn cmd_train(args: TrainArgs) -> Result<(), HarnessError> {
    let cfg = build_config(&args.config)?;
    if args.fold >= cfg.n_folds {
        return Err(HarnessError::InvalidConfig(format!(
            "fold {} out of range for {} folds",
            args.fold, cfg.n_folds
        )));
    }
    let manifest = load_manifest(&cfg.train_manifest, SplitTag::Train)?;
    let labels = manifest.labels();
    let folds = stratified_kfold(&labels, cfg.n_folds, cfg.seed)?;
    let mut held = vec![false; labels.len()];
    for &i in &folds[args.fold] {
        held[i] = true;
    }

    let mut bags: Vec<(EigenBasis, pcamil::data::Label)> = Vec::new();
    let mut d_in = 0usize;
    for (i, record) in manifest.records.iter().enumerate() {
        if held[i] {
            continue;
        }
        let bag = read_feature_bag(&record.bag_path)?;
        d_in = bag.feature_dim();
        bags.push((
            patient_embedding(&bag, cfg.k_eigenvectors, cfg.eps_rank)?,
            record.label,
        ));
    }
    let mil_cfg = MilConfig {
        d_in,
        label_smoothing: cfg.alpha,
        seed: cfg.seed.wrapping_add(1000 + args.fold as u64),
        ..cfg.mil.clone()
    };
    let (params, history) = train_fold(&bags, &mil_cfg, &CheckpointRule::default())?;

    std::fs::create_dir_all(&cfg.output_dir)?;
    let model_path = cfg.output_dir.join(format!("mil_fold{}.milm", args.fold));
    save_checkpoint(&params, &mil_cfg, &model_path)?;
    let history_path = cfg
        .output_dir
        .join(format!("fold{}_history.csv", args.fold));
    write_history(&history, &history_path)?;

    let last = history.epochs.last().expect("at least one epoch");
    println!(
        "fold {}: {} patients, final loss {:.4}, acc {:.3} (MSI {:.3}), checkpoint epoch {:?}",
        args.fold,
        bags.len(),
        last.mean_loss,
        last.acc_overall,
        last.acc_msi,
        history.checkpoint_epoch
    );
    println!("model: {}", model_path.display());
    Ok(())
}

fn cmd_run(args: RunArgs) -> Result<(), HarnessError> {
    let cfg = build_config(&args.config)?;
    let summary = run_experiment(&cfg)?;
    for (method, metrics) in &summary.aggregates {
        let fmt = |name: &str| {
            metrics
                .iter()
                .find(|(n, _)| n == name)
                .map(|(_, a)| format!("{:.3}+/-{:.3}", a.mean, a.sd))
                .unwrap_or_else(|| "-".into())
        };
        println!(
            "{:<12} auroc {} auprc {} f1 {} kappa {} acc {}",
            method.to_string(),
            fmt("auroc"),
            fmt("auprc"),
            fmt("f1"),
            fmt("kappa"),
            fmt("accuracy")
        );
    }
    if let Some(ci) = &summary.ci_crc {
        println!(
            "{:<12} f1 {:.3} kappa {:.3} acc {:.3} (deterministic)",
            Method::CiCrc.to_string(),
            ci.metrics.f1,
            ci.metrics.kappa,
            ci.metrics.accuracy
        );
    }
    for t in &summary.t_tests {
        println!(
            "t-test {} vs {} on {}: t = {:.3}, p = {:.5}",
            t.method_a, t.method_b, t.metric, t.t, t.p
        );
    }
    println!("reports written to {}", cfg.output_dir.display());
    Ok(())
}

fn cmd_sweep(args: SweepArgs) -> Result<(), HarnessError> {
    let cfg = build_config(&args.config)?;
    let axis = SweepAxis::parse(&args.axis).ok_or_else(|| {
        HarnessError::InvalidConfig(format!(
            "unknown sweep axis {:?} (expected k_eigenvectors, alpha, or beta)",
            args.axis
        ))
    })?;
    let table = hyperparameter_sweep(&cfg, axis, &args.values)?;
    std::fs::create_dir_all(&cfg.output_dir)?;
    let out = args
        .out
        .unwrap_or_else(|| cfg.output_dir.join(format!("sweep_{axis}.csv")));
    write_sweep_csv(&table, &out)?;
    for row in &table.rows {
        println!(
            "{} = {}: F1 {:.4}, kappa {:.4}",
            axis, row.value, row.mean_f1, row.mean_kappa
        );
    }
    println!("sweep table: {}", out.display());
    Ok(())
}

fn cmd_report(args: ReportArgs) -> Result<(), HarnessError> {
    reaggregate_reports(&args.output_dir)?;
    println!(
        "summary.json rebuilt from fold CSVs in {}",
        args.output_dir.display()
    );
    Ok(())
}

/// Config resolution: JSON file first (when given), then CLI overrides.
fn build_config(args: &ConfigArgs) -> Result<ExperimentConfig, HarnessError> {
    let mut cfg = match &args.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => {
            let (Some(train), Some(test), Some(out)) = (
                args.train_manifest.clone(),
                args.test_manifest.clone(),
                args.output_dir.clone(),
            ) else {
                return Err(HarnessError::InvalidConfig(
                    "need --config or all of --train-manifest, --test-manifest, --output-dir"
                        .into(),
                ));
            };
            ExperimentConfig::new(train, test, out)
        }
    };
    if let Some(v) = &args.train_manifest {
        cfg.train_manifest = v.clone();
    }
    if let Some(v) = &args.test_manifest {
        cfg.test_manifest = v.clone();
    }
    if let Some(v) = &args.output_dir {
        cfg.output_dir = v.clone();
    }
    if let Some(v) = args.n_folds {
        cfg.n_folds = v;
    }
    if let Some(v) = args.k_eigenvectors {
        cfg.k_eigenvectors = v;
    }
    if let Some(v) = args.alpha {
        cfg.alpha = v;
    }
    if let Some(v) = args.beta {
        cfg.prior.beta = v;
    }
    if let Some(v) = args.left_weight {
        cfg.prior.left_weight = v;
    }
    if let Some(names) = &args.methods {
        let mut methods = Vec::new();
        for name in names {
            let m = Method::parse(name).ok_or_else(|| {
                HarnessError::InvalidConfig(format!("unknown method {name:?}"))
            })?;
            if !methods.contains(&m) {
                methods.push(m);
            }
        }
        cfg.methods = methods;
    }
    if let Some(v) = args.threshold {
        cfg.threshold = v;
    }
    if let Some(v) = args.seed {
        cfg.seed = v;
    }
    if let Some(v) = args.epochs {
        cfg.mil.epochs = v;
    }
    if let Some(v) = args.lr {
        cfg.mil.lr = v;
    }
    if let Some(v) = args.d_hidden {
        cfg.mil.d_hidden = v;
    }
    if let Some(v) = args.d_att {
        cfg.mil.d_att = v;
    }
    if let Some(v) = args.n_heads {
        cfg.mil.n_heads = v;
    }
    if let Some(v) = args.scorer_epochs {
        cfg.scorer_epochs = v;
    }
    if let Some(v) = args.scorer_lr {
        cfg.scorer_lr = v;
    }
    if args.scale_by_eigenvalue {
        cfg.mil.scale_instances_by_eigenvalue = true;
    }
    cfg.validate()?;
    Ok(cfg)
}
