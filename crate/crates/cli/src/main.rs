//! Command-line front end: dataset generation, training, evaluation, ROI
//! analysis, and gradient checking over the documented text formats.
//!
//! Exit codes: 0 success, 1 runtime or data failure, 2 usage or config error.

use clap::{Args, Parser, Subcommand};
use mvgcn_core::autodiff::finite_difference_check;
use mvgcn_core::dataio::{
    generate_synthetic, load_dataset, load_model, save_dataset, save_matrix, save_model,
    write_metrics_report, Dataset, SynthConfig,
};
use mvgcn_core::eval::{
    auc, cluster_acquisitions, roi_group_report, similarity_matrix, PairGroup, RoiGroupReport,
    ScoredPair, KMEANS_RESTARTS,
};
use mvgcn_core::graph::{build_bgg, build_spectral_operator, chebyshev_apply, RoiAtlas, SigmaPolicy};
use mvgcn_core::model::{mvgcn_forward, Activation, ModelParams, PoolMode, NUM_CLASSES};
use mvgcn_core::numerics::{DenseMatrix, SeededRng};
use mvgcn_core::training::{build_stacks, generate_pairs, run_cross_validation, ModelKind, TrainConfig};
use mvgcn_core::Error;
use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

/// Prints a line to stdout, ignoring write failures so a closed pipe
/// (`mvgcn ... | head`) truncates output instead of aborting the run.
macro_rules! say {
    ($($arg:tt)*) => {{
        use std::io::Write as _;
        let _ = writeln!(std::io::stdout(), $($arg)*);
    }};
}

#[derive(Parser)]
#[command(
    name = "mvgcn",
    version,
    about = "Multi-view spectral graph matching over shared-geometry connectivity data"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a seeded synthetic dataset (atlas, manifest, matrices, labels).
    Generate(GenerateArgs),
    /// Stratified cross-validated training; writes report, similarity, and model files.
    Train(TrainArgs),
    /// Score every pair of a dataset with one saved model.
    Evaluate(EvaluateArgs),
    /// Rank ROIs by mean matching score within and between classes.
    Analyze(AnalyzeArgs),
    /// Verify analytic gradients against central finite differences.
    Gradcheck(GradcheckArgs),
}

/// Command failure carrying the process exit code.
struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn usage(message: impl Into<String>) -> Self {
        Failure {
            code: 2,
            message: message.into(),
        }
    }

    fn data(err: Error) -> Self {
        Failure {
            code: 1,
            message: err.to_string(),
        }
    }

    fn runtime(message: impl Into<String>) -> Self {
        Failure {
            code: 1,
            message: message.into(),
        }
    }
}

type CmdResult = Result<(), Failure>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Generate(args) => cmd_generate(args),
        Command::Train(args) => cmd_train(args),
        Command::Evaluate(args) => cmd_evaluate(args),
        Command::Analyze(args) => cmd_analyze(args),
        Command::Gradcheck(args) => cmd_gradcheck(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

fn kv(k: &str, v: impl std::fmt::Display) -> (String, String) {
    (k.to_string(), v.to_string())
}

/// Create the output directory and prove it accepts writes.
fn ensure_writable_dir(dir: &Path) -> CmdResult {
    fs::create_dir_all(dir)
        .map_err(|e| Failure::usage(format!("output directory {}: {e}", dir.display())))?;
    let probe = dir.join(".write-probe");
    fs::write(&probe, b"probe")
        .map_err(|e| Failure::usage(format!("output directory {} is not writable: {e}", dir.display())))?;
    let _ = fs::remove_file(&probe);
    Ok(())
}

#[derive(Args)]
struct GenerateArgs {
    /// Output directory for the dataset tree.
    #[arg(long)]
    out: PathBuf,
    /// Regions per acquisition matrix.
    #[arg(long, default_value_t = 20)]
    n: usize,
    /// Number of views per acquisition.
    #[arg(long, default_value_t = 3)]
    views: usize,
    /// Acquisition counts for the two classes.
    #[arg(long, num_args = 2, value_names = ["CLASS0", "CLASS1"], default_values_t = [30, 30])]
    per_class: Vec<usize>,
    /// Class separation in [0, 1]; 0 makes the classes indistinguishable.
    #[arg(long, default_value_t = 0.8)]
    separation: f64,
    /// Uniform noise amplitude added to every edge.
    #[arg(long, default_value_t = 0.1)]
    noise: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn cmd_generate(args: GenerateArgs) -> CmdResult {
    ensure_writable_dir(&args.out)?;
    let cfg = SynthConfig {
        n: args.n,
        m: args.views,
        per_class: [args.per_class[0], args.per_class[1]],
        class_separation: args.separation,
        noise: args.noise,
        seed: args.seed,
    };
    // Domain violations are config errors; nothing has been written yet.
    let dataset = generate_synthetic(&cfg).map_err(|e| Failure::usage(e.to_string()))?;
    let manifest = save_dataset(&args.out, &dataset).map_err(Failure::data)?;
    say!(
        "wrote {} acquisitions x {} views, n={} regions",
        dataset.len(),
        dataset.m(),
        dataset.n()
    );
    say!("manifest: {}", manifest.display());
    say!("atlas: {}", args.out.join("atlas.tsv").display());
    Ok(())
}

/// Key = value config file contents; flags override these values.
struct ConfigFile {
    values: BTreeMap<String, String>,
    path: Option<PathBuf>,
}

fn load_config_file(path: Option<&Path>) -> Result<ConfigFile, Failure> {
    let Some(path) = path else {
        return Ok(ConfigFile {
            values: BTreeMap::new(),
            path: None,
        });
    };
    let text = fs::read_to_string(path)
        .map_err(|e| Failure::usage(format!("config file {}: {e}", path.display())))?;
    let mut values = BTreeMap::new();
    for (idx, line) in text.lines().enumerate() {
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let Some((k, v)) = trimmed.split_once('=') else {
            return Err(Failure::usage(format!(
                "{}:{}: expected key = value",
                path.display(),
                idx + 1
            )));
        };
        values.insert(k.trim().to_string(), v.trim().to_string());
    }
    Ok(ConfigFile {
        values,
        path: Some(path.to_path_buf()),
    })
}

/// Resolves each config key as flag value, then file value, then default,
/// and remembers which file keys were consumed.
struct Resolver<'a> {
    file: &'a BTreeMap<String, String>,
    used: BTreeSet<String>,
}

impl<'a> Resolver<'a> {
    fn new(file: &'a BTreeMap<String, String>) -> Self {
        Resolver {
            file,
            used: BTreeSet::new(),
        }
    }

    fn parse_file<T: std::str::FromStr>(&self, key: &str, raw: &str) -> Result<T, Failure> {
        raw.parse()
            .map_err(|_| Failure::usage(format!("config key {key}: cannot parse {raw:?}")))
    }

    fn take<T: std::str::FromStr>(&mut self, key: &str, flag: Option<T>, default: T) -> Result<T, Failure> {
        self.used.insert(key.to_string());
        if let Some(v) = flag {
            return Ok(v);
        }
        match self.file.get(key) {
            Some(raw) => self.parse_file(key, raw),
            None => Ok(default),
        }
    }

    fn take_opt<T: std::str::FromStr>(&mut self, key: &str, flag: Option<T>) -> Result<Option<T>, Failure> {
        self.used.insert(key.to_string());
        if flag.is_some() {
            return Ok(flag);
        }
        match self.file.get(key) {
            Some(raw) => Ok(Some(self.parse_file(key, raw)?)),
            None => Ok(None),
        }
    }

    fn finish(self) -> Result<(), Failure> {
        for key in self.file.keys() {
            if !self.used.contains(key) {
                return Err(Failure::usage(format!("unknown config key {key:?}")));
            }
        }
        Ok(())
    }
}

#[derive(Args)]
struct TrainArgs {
    /// Dataset manifest path.
    #[arg(long)]
    manifest: PathBuf,
    /// Atlas path (region names and coordinates).
    #[arg(long)]
    atlas: PathBuf,
    /// Output directory for report, similarity, and model files.
    #[arg(long)]
    out: PathBuf,
    /// Optional key = value config file; explicit flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Chebyshev filter order.
    #[arg(long)]
    s: Option<usize>,
    /// Output features per convolution.
    #[arg(long)]
    f_out: Option<usize>,
    /// Neighbors per vertex in the geometry graph.
    #[arg(long)]
    knn_k: Option<usize>,
    /// Gaussian kernel width; omitted = mean pairwise distance.
    #[arg(long)]
    sigma: Option<f64>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// View pooling: max or mean.
    #[arg(long)]
    pool: Option<String>,
    /// Convolution activation: relu or identity.
    #[arg(long)]
    activation: Option<String>,
    #[arg(long)]
    folds: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Cap on shuffled pairs consumed per epoch.
    #[arg(long)]
    pairs_per_epoch: Option<usize>,
    /// Worker threads for within-batch gradient evaluation.
    #[arg(long)]
    workers: Option<usize>,
    /// Baseline architecture: raw, pca, fcn, or gcn.
    #[arg(long)]
    baseline: Option<String>,
    /// View index a baseline consumes.
    #[arg(long)]
    view: Option<usize>,
    /// Output dimension for --baseline pca.
    #[arg(long)]
    pca_dim: Option<usize>,
    /// Comma-separated layer sizes for --baseline fcn.
    #[arg(long)]
    fcn_dims: Option<String>,
    /// Dense layer size applied after matching (fcn baseline only).
    #[arg(long)]
    post_dim: Option<usize>,
    /// Comma-separated view subset for the full model.
    #[arg(long)]
    views: Option<String>,
}

fn parse_index_list(raw: &str, what: &str) -> Result<Vec<usize>, Failure> {
    raw.split(',')
        .map(|t| {
            t.trim()
                .parse::<usize>()
                .map_err(|_| Failure::usage(format!("{what}: cannot parse {t:?}")))
        })
        .collect()
}

struct KindFlags {
    baseline: Option<String>,
    view: Option<usize>,
    pca_dim: Option<usize>,
    fcn_dims: Option<String>,
    post_dim: Option<usize>,
    views: Option<String>,
}

fn resolve_kind(flags: KindFlags) -> Result<ModelKind, Failure> {
    match flags.baseline.as_deref() {
        None => {
            if flags.view.is_some()
                || flags.pca_dim.is_some()
                || flags.fcn_dims.is_some()
                || flags.post_dim.is_some()
            {
                return Err(Failure::usage(
                    "--view, --pca-dim, --fcn-dims, and --post-dim require --baseline",
                ));
            }
            let views = match &flags.views {
                Some(raw) => parse_index_list(raw, "--views")?,
                None => Vec::new(),
            };
            Ok(ModelKind::Mvgcn { views })
        }
        Some(name) => {
            if flags.views.is_some() {
                return Err(Failure::usage(
                    "--views selects views for the full model; use --view with --baseline",
                ));
            }
            let view = flags.view.unwrap_or(0);
            let reject_pca = || -> Result<(), Failure> {
                if flags.pca_dim.is_some() {
                    Err(Failure::usage("--pca-dim applies only to --baseline pca"))
                } else {
                    Ok(())
                }
            };
            let reject_fcn = || -> Result<(), Failure> {
                if flags.fcn_dims.is_some() || flags.post_dim.is_some() {
                    Err(Failure::usage(
                        "--fcn-dims and --post-dim apply only to --baseline fcn",
                    ))
                } else {
                    Ok(())
                }
            };
            match name {
                "gcn" => {
                    reject_pca()?;
                    reject_fcn()?;
                    Ok(ModelKind::SingleViewGcn { view })
                }
                "raw" => {
                    reject_pca()?;
                    reject_fcn()?;
                    Ok(ModelKind::RawEdges { view })
                }
                "pca" => {
                    reject_fcn()?;
                    let dim = flags
                        .pca_dim
                        .ok_or_else(|| Failure::usage("--baseline pca requires --pca-dim"))?;
                    Ok(ModelKind::Pca { view, dim })
                }
                "fcn" => {
                    reject_pca()?;
                    let raw = flags
                        .fcn_dims
                        .ok_or_else(|| Failure::usage("--baseline fcn requires --fcn-dims"))?;
                    let dims = parse_index_list(&raw, "--fcn-dims")?;
                    Ok(ModelKind::Fcn {
                        view,
                        dims,
                        post_dim: flags.post_dim,
                    })
                }
                other => Err(Failure::usage(format!(
                    "unknown baseline {other:?}; expected raw, pca, fcn, or gcn"
                ))),
            }
        }
    }
}

fn kind_echo(kind: &ModelKind) -> Vec<(String, String)> {
    let join = |xs: &[usize]| {
        xs.iter()
            .map(|v| v.to_string())
            .collect::<Vec<_>>()
            .join(",")
    };
    let mut echo = vec![kv("model", kind.name())];
    match kind {
        ModelKind::Mvgcn { views } => {
            let shown = if views.is_empty() { "all".to_string() } else { join(views) };
            echo.push(kv("views", shown));
        }
        ModelKind::SingleViewGcn { view } | ModelKind::RawEdges { view } => {
            echo.push(kv("view", view));
        }
        ModelKind::Pca { view, dim } => {
            echo.push(kv("view", view));
            echo.push(kv("pca_dim", dim));
        }
        ModelKind::Fcn { view, dims, post_dim } => {
            echo.push(kv("view", view));
            echo.push(kv("fcn_dims", join(dims)));
            match post_dim {
                Some(pd) => echo.push(kv("post_dim", pd)),
                None => echo.push(kv("post_dim", "none")),
            }
        }
    }
    echo
}

fn train_config_echo(config: &TrainConfig) -> Vec<(String, String)> {
    vec![
        kv("s", config.s),
        kv("f_out", config.f_out),
        kv("knn_k", config.knn_k),
        kv(
            "sigma",
            config
                .sigma
                .map(|v| v.to_string())
                .unwrap_or_else(|| "mean-distance".to_string()),
        ),
        kv("lr", config.lr),
        kv("epochs", config.epochs),
        kv("batch_size", config.batch_size),
        kv("pool", config.pool_mode.name()),
        kv("activation", config.activation.name()),
        kv("folds", config.folds),
        kv("seed", config.seed),
        kv(
            "pairs_per_epoch",
            config
                .pairs_per_epoch
                .map(|v| v.to_string())
                .unwrap_or_else(|| "all".to_string()),
        ),
        kv("workers", config.workers),
    ]
}

fn cmd_train(args: TrainArgs) -> CmdResult {
    let file = load_config_file(args.config.as_deref())?;
    let defaults = TrainConfig::default();
    let mut r = Resolver::new(&file.values);
    let config = TrainConfig {
        s: r.take("s", args.s, defaults.s)?,
        f_out: r.take("f_out", args.f_out, defaults.f_out)?,
        knn_k: r.take("knn_k", args.knn_k, defaults.knn_k)?,
        sigma: r.take_opt("sigma", args.sigma)?,
        lr: r.take("lr", args.lr, defaults.lr)?,
        epochs: r.take("epochs", args.epochs, defaults.epochs)?,
        batch_size: r.take("batch_size", args.batch_size, defaults.batch_size)?,
        pool_mode: {
            let name = r.take("pool", args.pool, defaults.pool_mode.name().to_string())?;
            PoolMode::parse(&name).map_err(|e| Failure::usage(e.to_string()))?
        },
        activation: {
            let name = r.take("activation", args.activation, defaults.activation.name().to_string())?;
            Activation::parse(&name).map_err(|e| Failure::usage(e.to_string()))?
        },
        folds: r.take("folds", args.folds, defaults.folds)?,
        seed: r.take("seed", args.seed, defaults.seed)?,
        pairs_per_epoch: r.take_opt("pairs_per_epoch", args.pairs_per_epoch)?,
        workers: r.take("workers", args.workers, defaults.workers)?,
    };
    let kind = resolve_kind(KindFlags {
        baseline: r.take_opt("baseline", args.baseline)?,
        view: r.take_opt("view", args.view)?,
        pca_dim: r.take_opt("pca_dim", args.pca_dim)?,
        fcn_dims: r.take_opt("fcn_dims", args.fcn_dims)?,
        post_dim: r.take_opt("post_dim", args.post_dim)?,
        views: r.take_opt("views", args.views)?,
    })?;
    r.finish()?;
    config.validate().map_err(|e| Failure::usage(e.to_string()))?;
    ensure_writable_dir(&args.out)?;

    let loaded = load_dataset(&args.manifest, &args.atlas).map_err(Failure::data)?;
    for w in &loaded.warnings {
        eprintln!("warning: {w}");
    }
    let dataset = loaded.dataset;
    let outcome = run_cross_validation(&dataset, &config, &kind).map_err(Failure::data)?;

    let mut echo = vec![
        kv("command", "train"),
        kv("manifest", args.manifest.display()),
        kv("atlas", args.atlas.display()),
        kv("out", args.out.display()),
        kv(
            "config_file",
            file.path
                .as_ref()
                .map(|p| p.display().to_string())
                .unwrap_or_else(|| "none".to_string()),
        ),
        kv("precedence", "flags > config file > defaults"),
    ];
    echo.extend(kind_echo(&kind));
    echo.extend(train_config_echo(&config));

    let mut metrics = vec![
        kv("auc_mean", outcome.auc_mean),
        kv("auc_std", outcome.auc_std),
        kv("nmi", outcome.nmi),
    ];
    for fold in &outcome.folds {
        metrics.push(kv(&format!("fold{}_auc", fold.fold), fold.auc));
    }
    let report_path = args.out.join("report.txt");
    write_metrics_report(&report_path, &echo, &metrics).map_err(Failure::data)?;
    let sim_path = args.out.join("similarity.txt");
    save_matrix(
        &sim_path,
        &outcome.similarity,
        &["acquisition similarity; -1.0 marks pairs never scored"],
    )
    .map_err(Failure::data)?;
    for fold in &outcome.folds {
        if let Some(model) = &fold.model {
            let path = args.out.join(format!("model_fold{}.txt", fold.fold));
            save_model(&path, model).map_err(Failure::data)?;
        }
    }
    say!("auc_mean: {}", outcome.auc_mean);
    say!("auc_std: {}", outcome.auc_std);
    say!("nmi: {}", outcome.nmi);
    say!("report: {}", report_path.display());
    Ok(())
}

/// Load a dataset and a model, check they agree, and build the filter
/// stacks the model's header describes.
fn load_scoring_context(
    manifest: &Path,
    atlas: &Path,
    model_path: &Path,
) -> Result<(Dataset, mvgcn_core::dataio::SavedModel, Vec<Vec<mvgcn_core::graph::ChebyshevStack>>), Failure> {
    let loaded = load_dataset(manifest, atlas).map_err(Failure::data)?;
    for w in &loaded.warnings {
        eprintln!("warning: {w}");
    }
    let dataset = loaded.dataset;
    let model = load_model(model_path).map_err(Failure::data)?;
    if model.params.theta.f_in() != dataset.n() {
        return Err(Failure::runtime(format!(
            "model expects {} regions, dataset has {}",
            model.params.theta.f_in(),
            dataset.n()
        )));
    }
    for &v in &model.views {
        if v >= dataset.m() {
            return Err(Failure::runtime(format!(
                "model consumes view {v}, dataset has {} views",
                dataset.m()
            )));
        }
    }
    let (stacks, _) = build_stacks(
        &dataset,
        &model.views,
        model.knn_k,
        Some(model.sigma),
        model.params.theta.order(),
    )
    .map_err(Failure::data)?;
    Ok((dataset, model, stacks))
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    atlas: PathBuf,
    /// Saved model file from a train run.
    #[arg(long)]
    model: PathBuf,
    /// Output directory for the report and similarity matrix.
    #[arg(long)]
    out: PathBuf,
    /// Seed for the clustering step.
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn cmd_evaluate(args: EvaluateArgs) -> CmdResult {
    ensure_writable_dir(&args.out)?;
    let (dataset, model, stacks) = load_scoring_context(&args.manifest, &args.atlas, &args.model)?;
    let labels = dataset.labels();
    let all: Vec<usize> = (0..dataset.len()).collect();
    let pairs = generate_pairs(&labels, &all).map_err(Failure::data)?;
    let scored = pairs
        .iter()
        .map(|p| {
            let out = mvgcn_forward(&stacks[p.idx_p], &stacks[p.idx_q], &model.params)?;
            Ok(ScoredPair {
                pair: p.clone(),
                score: out.probs[1],
            })
        })
        .collect::<Result<Vec<_>, Error>>()
        .map_err(Failure::data)?;
    let auc_value = auc(&scored).map_err(Failure::data)?;
    let similarity = similarity_matrix(&scored, dataset.len()).map_err(Failure::data)?;
    let cluster = cluster_acquisitions(&similarity, &labels, NUM_CLASSES, args.seed, KMEANS_RESTARTS)
        .map_err(Failure::data)?;

    let echo = vec![
        kv("command", "evaluate"),
        kv("manifest", args.manifest.display()),
        kv("atlas", args.atlas.display()),
        kv("model", args.model.display()),
        kv("out", args.out.display()),
        kv("seed", args.seed),
    ];
    let metrics = vec![
        kv("pairs", scored.len()),
        kv("auc", auc_value),
        kv("nmi", cluster.nmi),
    ];
    let report_path = args.out.join("report.txt");
    write_metrics_report(&report_path, &echo, &metrics).map_err(Failure::data)?;
    save_matrix(
        &args.out.join("similarity.txt"),
        &similarity,
        &["acquisition similarity over all pairs"],
    )
    .map_err(Failure::data)?;
    say!("pairs: {}", scored.len());
    say!("auc: {auc_value}");
    say!("nmi: {}", cluster.nmi);
    say!("report: {}", report_path.display());
    Ok(())
}

#[derive(Args)]
struct AnalyzeArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    atlas: PathBuf,
    /// Saved model file from a train run.
    #[arg(long)]
    model: PathBuf,
    /// Output directory for the three group TSV files.
    #[arg(long)]
    out: PathBuf,
    /// Number of ROIs in each similar / dissimilar ranking.
    #[arg(long, default_value_t = 10)]
    top_k: usize,
}

fn write_roi_tsv(
    path: &Path,
    echo: &[(String, String)],
    report: &RoiGroupReport,
    names: &[String],
) -> CmdResult {
    let mut text = String::new();
    let _ = writeln!(text, "# mvgcn-roi-report v1");
    let _ = writeln!(text, "# config");
    for (k, v) in echo {
        let _ = writeln!(text, "# {k}: {v}");
    }
    let _ = writeln!(text, "# group: {}", report.group.name());
    let _ = writeln!(text, "# pairs: {}", report.pair_count);
    for (section, rois) in [
        ("similar", &report.top_similar),
        ("dissimilar", &report.top_dissimilar),
    ] {
        let _ = writeln!(text, "# section: {section}");
        let _ = writeln!(text, "rank\troi_name\tmean_similarity");
        for (rank, &roi) in rois.iter().enumerate() {
            let _ = writeln!(text, "{}\t{}\t{}", rank + 1, names[roi], report.mean_r[roi]);
        }
    }
    fs::write(path, text).map_err(|e| Failure::data(Error::io(path.display().to_string(), e)))
}

fn cmd_analyze(args: AnalyzeArgs) -> CmdResult {
    ensure_writable_dir(&args.out)?;
    let (dataset, model, stacks) = load_scoring_context(&args.manifest, &args.atlas, &args.model)?;
    let labels = dataset.labels();
    let echo = vec![
        kv("command", "analyze"),
        kv("manifest", args.manifest.display()),
        kv("atlas", args.atlas.display()),
        kv("model", args.model.display()),
        kv("out", args.out.display()),
        kv("top_k", args.top_k),
        kv("class0", &dataset.class_names[0]),
        kv("class1", &dataset.class_names[1]),
    ];
    for group in [PairGroup::Within(0), PairGroup::Within(1), PairGroup::Between] {
        let report = roi_group_report(&labels, &stacks, &model.params, group, args.top_k)
            .map_err(Failure::data)?;
        let path = args.out.join(format!("roi_{}.tsv", report.group.name()));
        write_roi_tsv(&path, &echo, &report, dataset.atlas.names())?;
        say!("wrote {}", path.display());
    }
    Ok(())
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Central-difference step size.
    #[arg(long, default_value_t = 1e-5)]
    epsilon: f64,
    /// Seeded model instances to scan.
    #[arg(long, default_value_t = 20)]
    instances: usize,
    /// Largest acceptable relative error.
    #[arg(long, default_value_t = 1e-5)]
    threshold: f64,
}

/// Random geometry, signals, and parameters for one gradient-check instance.
fn gradcheck_instance(
    n: usize,
    m: usize,
    s: usize,
    f_out: usize,
    activation: Activation,
    pool: PoolMode,
    seed: u64,
) -> Result<
    (
        Vec<mvgcn_core::graph::ChebyshevStack>,
        Vec<mvgcn_core::graph::ChebyshevStack>,
        ModelParams,
    ),
    Error,
> {
    let mut rng = SeededRng::new(seed);
    let names: Vec<String> = (0..n).map(|i| format!("roi{i:03}")).collect();
    let mut coords = DenseMatrix::zeros(n, 3);
    for v in coords.data_mut() {
        *v = rng.uniform(0.0, 10.0);
    }
    let atlas = RoiAtlas::new(names, coords)?;
    let bgg = build_bgg(&atlas, 2.min(n - 1), SigmaPolicy::MeanDistance)?;
    let op = build_spectral_operator(&bgg)?;
    let signal = |rng: &mut SeededRng| {
        let mut x = DenseMatrix::zeros(n, n);
        for v in x.data_mut() {
            *v = rng.uniform(0.0, 1.0);
        }
        x
    };
    let stacks_p = (0..m)
        .map(|_| chebyshev_apply(&op, &signal(&mut rng), s))
        .collect::<Result<Vec<_>, Error>>()?;
    let stacks_q = (0..m)
        .map(|_| chebyshev_apply(&op, &signal(&mut rng), s))
        .collect::<Result<Vec<_>, Error>>()?;
    let mut params = ModelParams::init(n, f_out, s, n, activation, pool, &mut rng);
    for v in params.softmax_w.data_mut() {
        *v = rng.uniform(-0.8, 0.8);
    }
    Ok((stacks_p, stacks_q, params))
}

fn cmd_gradcheck(args: GradcheckArgs) -> CmdResult {
    if args.instances == 0 {
        return Err(Failure::usage("--instances must be at least 1"));
    }
    let shapes = [(4usize, 1usize, 2usize, 2usize), (6, 2, 3, 4), (8, 3, 5, 8)];
    let pools = [PoolMode::Max, PoolMode::Mean];
    let activations = [Activation::Relu, Activation::Identity];
    say!("instances: {}", args.instances);
    say!("epsilon: {}", args.epsilon);
    say!("threshold: {}", args.threshold);
    let mut worst = 0.0f64;
    let mut checked = 0usize;
    let mut skipped = 0usize;
    for i in 0..args.instances {
        let (n, m, s, f_out) = shapes[i % shapes.len()];
        let pool = pools[(i / shapes.len()) % pools.len()];
        let activation = activations[(i / (shapes.len() * pools.len())) % activations.len()];
        let seed = args.seed.wrapping_add(1 + i as u64);
        let (sp, sq, params) = gradcheck_instance(n, m, s, f_out, activation, pool, seed)
            .map_err(Failure::data)?;
        let mut rng = SeededRng::new(seed ^ 0xFD);
        let report = finite_difference_check(&sp, &sq, i % 2, &params, args.epsilon, 40, &mut rng)
            .map_err(Failure::data)?;
        say!(
            "instance {i}: n={n} m={m} s={s} f_out={f_out} pool={} activation={} max_rel_error={:.3e} checked={} skipped={}",
            pool.name(),
            activation.name(),
            report.max_rel_error,
            report.checked,
            report.skipped
        );
        worst = worst.max(report.max_rel_error);
        checked += report.checked;
        skipped += report.skipped;
    }
    say!("checked: {checked}");
    say!("skipped: {skipped}");
    say!("max_rel_error: {worst:e}");
    if worst >= args.threshold {
        return Err(Failure::runtime(format!(
            "gradient check failed: max relative error {worst:e} >= {}",
            args.threshold
        )));
    }
    say!("gradient check passed");
    Ok(())
}
