//! Subcommand implementations: config loading and flag overrides, the calls
//! into the library, and artifact writing.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::Args;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use laso_core::eval::{
    classification_eval, distance, retrieval_eval, unseen_classifier_train, CompositeScorer,
    DistanceKind, EvalReport,
};
use laso_core::fewshot::{run_benchmark, AugMethod, BenchmarkConfig, LasoTrainer, TrainConfig};
use laso_core::gradsuite;
use laso_core::labels::iou;
use laso_core::nets::{
    load_model, parse_expr, save_model, AnalyticVariant, OpRoute, SetExpr,
};
use laso_core::synth::{
    generate_bank, import_bank, load_bank, parse_feature_csv, save_bank, FeatureBank,
    GeneratorSpec,
};

/// Flags override config-file fields; unset flags leave them alone.
macro_rules! set_if {
    ($dst:expr, $src:expr) => {
        if let Some(v) = $src {
            $dst = v;
        }
    };
}

fn load_config<T: DeserializeOwned + Default>(path: &Option<PathBuf>) -> Result<T> {
    match path {
        None => Ok(T::default()),
        Some(p) => {
            let text = fs::read_to_string(p)
                .with_context(|| format!("reading config {}", p.display()))?;
            serde_json::from_str(&text).with_context(|| format!("parsing config {}", p.display()))
        }
    }
}

/// Enum flags share their JSON spelling; parse them through serde so the
/// config file and the command line accept exactly the same names.
fn parse_enum<T: DeserializeOwned>(what: &str, s: &str) -> Result<T> {
    serde_json::from_value(serde_json::Value::String(s.to_string()))
        .with_context(|| format!("parsing {what} `{s}`"))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_text(path, &text)
}

fn out_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

/// The reproducibility record written next to every run's outputs.
fn write_resolved<T: Serialize>(
    path: &Path,
    command: &str,
    inputs: serde_json::Value,
    cfg: &T,
) -> Result<()> {
    write_json(
        path,
        &serde_json::json!({ "command": command, "inputs": inputs, "config": cfg }),
    )
}

fn load_bank_at(path: &Path) -> Result<FeatureBank> {
    load_bank(path).with_context(|| format!("loading bank {}", path.display()))
}

fn load_model_at(path: &Path) -> Result<laso_core::nets::LasoModel> {
    load_model(path).with_context(|| format!("loading model {}", path.display()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum RouteKind {
    Learned,
    Analytic,
}

// --- gen -----------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
struct GenConfig {
    #[serde(flatten)]
    spec: GeneratorSpec,
    n: usize,
    seed: u64,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            spec: GeneratorSpec::default(),
            n: 3200,
            seed: 7,
        }
    }
}

#[derive(Args)]
pub struct GenArgs {
    /// Output bank file
    #[arg(long)]
    out: PathBuf,
    /// JSON config; flags below override its fields
    #[arg(long)]
    config: Option<PathBuf>,
    /// Import rows from CSV (one row: d floats then l bits) instead of generating
    #[arg(long)]
    from_csv: Option<PathBuf>,
    /// Number of samples to generate
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Feature dimension
    #[arg(long)]
    d: Option<usize>,
    /// Number of labels
    #[arg(long)]
    l: Option<usize>,
    #[arg(long)]
    seen_count: Option<usize>,
    /// disjoint_blocks or random_nonneg
    #[arg(long)]
    prototype_mode: Option<String>,
    #[arg(long)]
    noise_sigma: Option<f64>,
    /// Unit amplitudes, no noise (exact block codes)
    #[arg(long)]
    clean_mode: Option<bool>,
    /// Restrict train-split samples to seen labels
    #[arg(long)]
    filtered: Option<bool>,
    #[arg(long)]
    amplitude_lo: Option<f64>,
    #[arg(long)]
    amplitude_hi: Option<f64>,
    #[arg(long)]
    labels_min: Option<usize>,
    #[arg(long)]
    labels_max: Option<usize>,
    #[arg(long)]
    train_fraction: Option<f64>,
    #[arg(long)]
    aux_fraction: Option<f64>,
}

pub fn gen(a: GenArgs) -> Result<()> {
    let mut cfg: GenConfig = load_config(&a.config)?;
    set_if!(cfg.n, a.n);
    set_if!(cfg.seed, a.seed);
    set_if!(cfg.spec.d, a.d);
    set_if!(cfg.spec.l, a.l);
    set_if!(cfg.spec.seen_count, a.seen_count);
    if let Some(s) = &a.prototype_mode {
        cfg.spec.prototype_mode = parse_enum("prototype mode", s)?;
    }
    set_if!(cfg.spec.noise_sigma, a.noise_sigma);
    set_if!(cfg.spec.clean_mode, a.clean_mode);
    set_if!(cfg.spec.filtered, a.filtered);
    set_if!(cfg.spec.amplitude_range.0, a.amplitude_lo);
    set_if!(cfg.spec.amplitude_range.1, a.amplitude_hi);
    set_if!(cfg.spec.labels_per_sample.0, a.labels_min);
    set_if!(cfg.spec.labels_per_sample.1, a.labels_max);
    set_if!(cfg.spec.train_fraction, a.train_fraction);
    set_if!(cfg.spec.aux_fraction, a.aux_fraction);

    let bank = match &a.from_csv {
        Some(p) => {
            let text =
                fs::read_to_string(p).with_context(|| format!("reading CSV {}", p.display()))?;
            let (features, labels) = parse_feature_csv(&text, cfg.spec.d, cfg.spec.l)
                .with_context(|| format!("parsing CSV {}", p.display()))?;
            import_bank(&cfg.spec, features, labels, cfg.seed)?
        }
        None => generate_bank(&cfg.spec, cfg.n, cfg.seed)?,
    };
    if let Some(dir) = a.out.parent() {
        if !dir.as_os_str().is_empty() {
            out_dir(dir)?;
        }
    }
    save_bank(&bank, &a.out).with_context(|| format!("writing bank {}", a.out.display()))?;

    let mut cfg_path = a.out.clone().into_os_string();
    cfg_path.push(".config.json");
    write_resolved(
        Path::new(&cfg_path),
        "gen",
        serde_json::json!({ "out": a.out, "from_csv": a.from_csv }),
        &cfg,
    )?;
    eprintln!(
        "wrote {} samples (d={}, l={}) to {}",
        bank.n(),
        bank.d,
        bank.l,
        a.out.display()
    );
    Ok(())
}

// --- pretrain-classifier ---------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
struct PretrainConfig {
    epochs: usize,
    lr: f64,
    batch: usize,
    depth: usize,
    dropout: f64,
    leaky_slope: f64,
    seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        let t = TrainConfig::default();
        PretrainConfig {
            epochs: t.pretrain_epochs,
            lr: t.lr,
            batch: t.batch,
            depth: t.depth,
            dropout: t.dropout,
            leaky_slope: t.leaky_slope,
            seed: t.seed,
        }
    }
}

#[derive(Args)]
pub struct PretrainArgs {
    #[arg(long)]
    bank: PathBuf,
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    depth: Option<usize>,
    #[arg(long)]
    dropout: Option<f64>,
    #[arg(long)]
    leaky_slope: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
}

pub fn pretrain_classifier(a: PretrainArgs) -> Result<()> {
    let mut cfg: PretrainConfig = load_config(&a.config)?;
    set_if!(cfg.epochs, a.epochs);
    set_if!(cfg.lr, a.lr);
    set_if!(cfg.batch, a.batch);
    set_if!(cfg.depth, a.depth);
    set_if!(cfg.dropout, a.dropout);
    set_if!(cfg.leaky_slope, a.leaky_slope);
    set_if!(cfg.seed, a.seed);

    let bank = load_bank_at(&a.bank)?;
    let tc = TrainConfig {
        depth: cfg.depth,
        dropout: cfg.dropout,
        leaky_slope: cfg.leaky_slope,
        batch: cfg.batch,
        lr: cfg.lr,
        pretrain_epochs: cfg.epochs,
        epochs: 0,
        seed: cfg.seed,
        ..TrainConfig::default()
    };
    let mut trainer = LasoTrainer::new(bank.d, bank.l, tc)?;
    let log = trainer.run(&bank).context("classifier training aborted")?;

    out_dir(&a.out_dir)?;
    save_model(&trainer.model, &a.out_dir.join("model.laso"))?;
    write_text(&a.out_dir.join("train_log.csv"), &log.to_csv())?;
    write_resolved(
        &a.out_dir.join("resolved_config.json"),
        "pretrain-classifier",
        serde_json::json!({ "bank": a.bank, "out_dir": a.out_dir }),
        &cfg,
    )?;
    if let Some(last) = log.epochs.last() {
        eprintln!(
            "pretrained classifier for {} epochs, final loss {:.4}",
            log.epochs.len(),
            last.classifier_loss
        );
    }
    Ok(())
}

// --- train -----------------------------------------------------------------------

#[derive(Args)]
pub struct TrainArgs {
    #[arg(long)]
    bank: PathBuf,
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    /// Start from this checkpoint instead of a fresh model (its architecture
    /// wins over --depth/--dropout/--leaky-slope)
    #[arg(long)]
    init: Option<PathBuf>,
    #[arg(long)]
    depth: Option<usize>,
    #[arg(long)]
    dropout: Option<f64>,
    #[arg(long)]
    leaky_slope: Option<f64>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    pretrain_epochs: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    w_laso: Option<f64>,
    #[arg(long)]
    w_sym: Option<f64>,
    #[arg(long)]
    w_mc: Option<f64>,
    /// Square the symmetry penalty norms
    #[arg(long)]
    square_sym: Option<bool>,
    #[arg(long)]
    plateau_factor: Option<f64>,
    #[arg(long)]
    plateau_patience: Option<usize>,
    #[arg(long)]
    plateau_min_improvement: Option<f64>,
    /// Fraction of training pairs that are (X, X) identity pairs
    #[arg(long)]
    self_pair_fraction: Option<f64>,
    /// Fraction of distinct pairs with a shared third sample mixed in
    #[arg(long)]
    shared_overlay_fraction: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
}

fn merge_train_config(a: &TrainArgs, cfg: &mut TrainConfig) {
    set_if!(cfg.depth, a.depth);
    set_if!(cfg.dropout, a.dropout);
    set_if!(cfg.leaky_slope, a.leaky_slope);
    set_if!(cfg.batch, a.batch);
    set_if!(cfg.lr, a.lr);
    set_if!(cfg.pretrain_epochs, a.pretrain_epochs);
    set_if!(cfg.epochs, a.epochs);
    set_if!(cfg.weights.laso, a.w_laso);
    set_if!(cfg.weights.sym, a.w_sym);
    set_if!(cfg.weights.mc, a.w_mc);
    set_if!(cfg.square_sym, a.square_sym);
    set_if!(cfg.plateau_factor, a.plateau_factor);
    set_if!(cfg.plateau_patience, a.plateau_patience);
    set_if!(cfg.plateau_min_improvement, a.plateau_min_improvement);
    set_if!(cfg.self_pair_fraction, a.self_pair_fraction);
    set_if!(cfg.shared_overlay_fraction, a.shared_overlay_fraction);
    set_if!(cfg.seed, a.seed);
}

pub fn train(a: TrainArgs) -> Result<()> {
    let mut cfg: TrainConfig = load_config(&a.config)?;
    merge_train_config(&a, &mut cfg);

    let bank = load_bank_at(&a.bank)?;
    let mut trainer = match &a.init {
        Some(p) => LasoTrainer::from_model(load_model_at(p)?, cfg.clone())?,
        None => LasoTrainer::new(bank.d, bank.l, cfg.clone())?,
    };
    let log = trainer.run(&bank).context("training aborted")?;

    out_dir(&a.out_dir)?;
    save_model(&trainer.model, &a.out_dir.join("model.laso"))?;
    write_text(&a.out_dir.join("train_log.csv"), &log.to_csv())?;
    write_resolved(
        &a.out_dir.join("resolved_config.json"),
        "train",
        serde_json::json!({ "bank": a.bank, "out_dir": a.out_dir, "init": a.init }),
        &cfg,
    )?;
    if let Some(last) = log.epochs.last() {
        eprintln!(
            "trained {} epochs, final total loss {:.4} (lr {:.2e})",
            log.epochs.len(),
            last.total_loss,
            last.lr
        );
    }
    Ok(())
}

// --- eval-class --------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
struct EvalClassConfig {
    pairing_seed: u64,
    route: RouteKind,
    variant: AnalyticVariant,
    /// Score unseen labels with a classifier trained on the reserved pool.
    overlay_unseen: bool,
    unseen_epochs: usize,
    unseen_lr: f64,
    unseen_batch: usize,
    unseen_seed: u64,
}

impl Default for EvalClassConfig {
    fn default() -> Self {
        EvalClassConfig {
            pairing_seed: 0,
            route: RouteKind::Learned,
            variant: AnalyticVariant::MinMax,
            overlay_unseen: true,
            unseen_epochs: 200,
            unseen_lr: 0.01,
            unseen_batch: 16,
            unseen_seed: 1,
        }
    }
}

#[derive(Args)]
pub struct EvalClassArgs {
    #[arg(long)]
    bank: PathBuf,
    /// Trained checkpoint; supplies the classifier and, for the learned
    /// route, the operators
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    pairing_seed: Option<u64>,
    /// learned or analytic
    #[arg(long)]
    route: Option<String>,
    /// min_max or arithmetic
    #[arg(long)]
    variant: Option<String>,
    #[arg(long)]
    overlay_unseen: Option<bool>,
    #[arg(long)]
    unseen_epochs: Option<usize>,
    #[arg(long)]
    unseen_lr: Option<f64>,
    #[arg(long)]
    unseen_batch: Option<usize>,
    #[arg(long)]
    unseen_seed: Option<u64>,
}

fn merge_eval_class(a: &EvalClassArgs, cfg: &mut EvalClassConfig) -> Result<()> {
    set_if!(cfg.pairing_seed, a.pairing_seed);
    if let Some(s) = &a.route {
        cfg.route = parse_enum("route", s)?;
    }
    if let Some(s) = &a.variant {
        cfg.variant = parse_enum("analytic variant", s)?;
    }
    set_if!(cfg.overlay_unseen, a.overlay_unseen);
    set_if!(cfg.unseen_epochs, a.unseen_epochs);
    set_if!(cfg.unseen_lr, a.unseen_lr);
    set_if!(cfg.unseen_batch, a.unseen_batch);
    set_if!(cfg.unseen_seed, a.unseen_seed);
    Ok(())
}

fn eval_with_route(
    bank: &FeatureBank,
    model: &laso_core::nets::LasoModel,
    cfg: &EvalClassConfig,
    route: RouteKind,
) -> Result<EvalReport> {
    let overlay = if cfg.overlay_unseen {
        Some(
            unseen_classifier_train(
                bank,
                cfg.unseen_epochs,
                cfg.unseen_lr,
                cfg.unseen_batch,
                cfg.unseen_seed,
            )
            .context("training the unseen-label classifier (--overlay-unseen false to skip)")?,
        )
    } else {
        None
    };
    let scorer = CompositeScorer {
        base: &model.classifier,
        overlay: overlay.as_ref(),
    };
    let op_route = match route {
        RouteKind::Learned => OpRoute::Learned(model),
        RouteKind::Analytic => OpRoute::Analytic(cfg.variant),
    };
    Ok(classification_eval(
        &scorer,
        &op_route,
        bank,
        cfg.pairing_seed,
    )?)
}

pub fn eval_class(a: EvalClassArgs) -> Result<()> {
    let mut cfg: EvalClassConfig = load_config(&a.config)?;
    merge_eval_class(&a, &mut cfg)?;

    let bank = load_bank_at(&a.bank)?;
    let model = load_model_at(&a.model)?;
    let report = eval_with_route(&bank, &model, &cfg, cfg.route)?;

    out_dir(&a.out_dir)?;
    write_text(&a.out_dir.join("per_class.csv"), &report.per_class_csv())?;
    write_text(&a.out_dir.join("summary.csv"), &report.summary_csv())?;
    write_json(&a.out_dir.join("report.json"), &report)?;
    write_resolved(
        &a.out_dir.join("resolved_config.json"),
        "eval-class",
        serde_json::json!({ "bank": a.bank, "model": a.model, "out_dir": a.out_dir }),
        &cfg,
    )?;
    eprintln!("evaluated {} pairs; summary:", report.n_pairs);
    eprint!("{}", report.summary_csv());
    Ok(())
}

// --- eval-retrieval -----------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
struct EvalRetrievalConfig {
    pairing_seed: u64,
    route: RouteKind,
    variant: AnalyticVariant,
    ks: Vec<usize>,
    distance: DistanceKind,
}

impl Default for EvalRetrievalConfig {
    fn default() -> Self {
        EvalRetrievalConfig {
            pairing_seed: 0,
            route: RouteKind::Learned,
            variant: AnalyticVariant::MinMax,
            ks: vec![1, 3, 5],
            distance: DistanceKind::SqEuclidean,
        }
    }
}

#[derive(Args)]
pub struct EvalRetrievalArgs {
    #[arg(long)]
    bank: PathBuf,
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    pairing_seed: Option<u64>,
    /// learned or analytic
    #[arg(long)]
    route: Option<String>,
    /// min_max or arithmetic
    #[arg(long)]
    variant: Option<String>,
    /// Comma-separated neighborhood sizes, e.g. 1,3,5
    #[arg(long)]
    ks: Option<String>,
    /// sq_euclidean or cosine
    #[arg(long)]
    distance: Option<String>,
}

pub fn eval_retrieval(a: EvalRetrievalArgs) -> Result<()> {
    let mut cfg: EvalRetrievalConfig = load_config(&a.config)?;
    set_if!(cfg.pairing_seed, a.pairing_seed);
    if let Some(s) = &a.route {
        cfg.route = parse_enum("route", s)?;
    }
    if let Some(s) = &a.variant {
        cfg.variant = parse_enum("analytic variant", s)?;
    }
    if let Some(s) = &a.ks {
        cfg.ks = s
            .split(',')
            .map(|t| t.trim().parse::<usize>().with_context(|| format!("parsing k `{t}`")))
            .collect::<Result<_>>()?;
    }
    if let Some(s) = &a.distance {
        cfg.distance = parse_enum("distance", s)?;
    }

    let bank = load_bank_at(&a.bank)?;
    let model = match (&a.model, cfg.route) {
        (Some(p), _) => Some(load_model_at(p)?),
        (None, RouteKind::Learned) => bail!("--route learned needs --model"),
        (None, RouteKind::Analytic) => None,
    };
    let route = match cfg.route {
        RouteKind::Learned => OpRoute::Learned(model.as_ref().expect("checked above")),
        RouteKind::Analytic => OpRoute::Analytic(cfg.variant),
    };
    let report = retrieval_eval(&route, &bank, &cfg.ks, cfg.pairing_seed, cfg.distance)?;

    out_dir(&a.out_dir)?;
    write_text(&a.out_dir.join("retrieval.csv"), &report.to_csv())?;
    write_json(&a.out_dir.join("report.json"), &report)?;
    write_resolved(
        &a.out_dir.join("resolved_config.json"),
        "eval-retrieval",
        serde_json::json!({ "bank": a.bank, "model": a.model, "out_dir": a.out_dir }),
        &cfg,
    )?;
    eprintln!(
        "retrieval over {} pairs, pool {}:",
        report.n_pairs, report.pool_size
    );
    eprint!("{}", report.to_csv());
    Ok(())
}

// --- ablate ---------------------------------------------------------------------------

#[derive(Args)]
pub struct AblateArgs {
    #[arg(long)]
    bank: PathBuf,
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    pairing_seed: Option<u64>,
    /// min_max or arithmetic
    #[arg(long)]
    variant: Option<String>,
    #[arg(long)]
    overlay_unseen: Option<bool>,
    #[arg(long)]
    unseen_epochs: Option<usize>,
    #[arg(long)]
    unseen_lr: Option<f64>,
    #[arg(long)]
    unseen_batch: Option<usize>,
    #[arg(long)]
    unseen_seed: Option<u64>,
}

fn ablation_csv(learned: &EvalReport, analytic: &EvalReport) -> String {
    let mut out = String::from("method,op,subset,evaluated_classes,map\n");
    for (method, report) in [("analytic", analytic), ("learned", learned)] {
        for line in report.summary_csv().lines().skip(1) {
            out.push_str(&format!("{method},{line}\n"));
        }
    }
    out
}

pub fn ablate(a: AblateArgs) -> Result<()> {
    let mut cfg: EvalClassConfig = load_config(&a.config)?;
    let sub = EvalClassArgs {
        bank: a.bank.clone(),
        model: a.model.clone(),
        out_dir: a.out_dir.clone(),
        config: None,
        pairing_seed: a.pairing_seed,
        route: None,
        variant: a.variant.clone(),
        overlay_unseen: a.overlay_unseen,
        unseen_epochs: a.unseen_epochs,
        unseen_lr: a.unseen_lr,
        unseen_batch: a.unseen_batch,
        unseen_seed: a.unseen_seed,
    };
    merge_eval_class(&sub, &mut cfg)?;

    let bank = load_bank_at(&a.bank)?;
    let model = load_model_at(&a.model)?;
    let learned = eval_with_route(&bank, &model, &cfg, RouteKind::Learned)?;
    let analytic = eval_with_route(&bank, &model, &cfg, RouteKind::Analytic)?;

    out_dir(&a.out_dir)?;
    write_text(&a.out_dir.join("ablation.csv"), &ablation_csv(&learned, &analytic))?;
    write_json(
        &a.out_dir.join("reports.json"),
        &serde_json::json!({ "learned": learned, "analytic": analytic }),
    )?;
    write_resolved(
        &a.out_dir.join("resolved_config.json"),
        "ablate",
        serde_json::json!({ "bank": a.bank, "model": a.model, "out_dir": a.out_dir }),
        &cfg,
    )?;
    eprint!("{}", ablation_csv(&learned, &analytic));
    Ok(())
}

// --- fewshot ---------------------------------------------------------------------------

#[derive(Args)]
pub struct FewshotArgs {
    #[arg(long)]
    bank: PathBuf,
    /// Needed when any learned_* method is in the grid
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    /// Comma-separated: none,mixup,analytic_int,analytic_uni,learned_int,learned_uni,learned_sub
    #[arg(long)]
    methods: Option<String>,
    #[arg(long)]
    n_shot: Option<usize>,
    #[arg(long)]
    episodes: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    classifier_lr: Option<f64>,
    #[arg(long)]
    batch: Option<usize>,
    /// Synthesized samples per epoch, as a multiple of the support size
    #[arg(long)]
    synth_per_support: Option<usize>,
    #[arg(long)]
    skip_empty_targets: Option<bool>,
    #[arg(long)]
    mixup_alpha: Option<f64>,
    /// min_max or arithmetic
    #[arg(long)]
    analytic_variant: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
}

pub fn fewshot(a: FewshotArgs) -> Result<()> {
    let mut cfg: BenchmarkConfig = load_config(&a.config)?;
    if let Some(s) = &a.methods {
        cfg.methods = s
            .split(',')
            .map(|t| t.trim().parse::<AugMethod>().map_err(anyhow::Error::from))
            .collect::<Result<_>>()?;
    }
    set_if!(cfg.n_shot, a.n_shot);
    set_if!(cfg.episodes, a.episodes);
    set_if!(cfg.epochs, a.epochs);
    set_if!(cfg.classifier_lr, a.classifier_lr);
    set_if!(cfg.batch, a.batch);
    set_if!(cfg.synth_per_support, a.synth_per_support);
    set_if!(cfg.skip_empty_targets, a.skip_empty_targets);
    set_if!(cfg.mixup_alpha, a.mixup_alpha);
    if let Some(s) = &a.analytic_variant {
        cfg.analytic_variant = parse_enum("analytic variant", s)?;
    }
    set_if!(cfg.seed, a.seed);

    let bank = load_bank_at(&a.bank)?;
    let model = a.model.as_deref().map(load_model_at).transpose()?;
    let result = run_benchmark(&bank, model.as_ref(), &cfg)?;

    out_dir(&a.out_dir)?;
    write_text(&a.out_dir.join("fewshot.csv"), &result.to_csv())?;
    write_json(&a.out_dir.join("summary.json"), &result)?;
    write_resolved(
        &a.out_dir.join("resolved_config.json"),
        "fewshot",
        serde_json::json!({ "bank": a.bank, "model": a.model, "out_dir": a.out_dir }),
        &cfg,
    )?;
    for m in &result.methods {
        eprintln!(
            "{:<14} mean mAP {:.4} (std {:.4})",
            m.method.to_string(),
            m.mean,
            m.std
        );
    }
    Ok(())
}

// --- gradcheck --------------------------------------------------------------------------

#[derive(Args)]
pub struct GradcheckArgs {
    /// Random instances per check
    #[arg(long, default_value_t = 100)]
    instances: usize,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    /// Also write the report (and resolved config) here
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

pub fn gradcheck(a: GradcheckArgs) -> Result<()> {
    let report = gradsuite::run_suite(a.instances, a.seed)?;
    print!("{}", report.to_text());
    if let Some(dir) = &a.out_dir {
        out_dir(dir)?;
        write_text(&dir.join("gradcheck.txt"), &report.to_text())?;
        write_resolved(
            &dir.join("resolved_config.json"),
            "gradcheck",
            serde_json::json!({ "out_dir": dir }),
            &serde_json::json!({ "instances": a.instances, "seed": a.seed }),
        )?;
    }
    if !report.passed() {
        bail!("gradient checks failed");
    }
    Ok(())
}

// --- compose ----------------------------------------------------------------------------

#[derive(Args)]
pub struct ComposeArgs {
    /// Set expression over sample ids: uni(a,b) | int(a,b) | sub(a,b) | <id>
    expr: String,
    #[arg(long)]
    bank: PathBuf,
    /// Required for the learned route
    #[arg(long)]
    model: Option<PathBuf>,
    /// learned or analytic; defaults to learned when --model is given
    #[arg(long)]
    route: Option<String>,
    /// min_max or arithmetic
    #[arg(long)]
    variant: Option<String>,
    /// Neighbors to report
    #[arg(long, default_value_t = 5)]
    k: usize,
    /// sq_euclidean or cosine
    #[arg(long)]
    distance: Option<String>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

fn leaf_samples(expr: &SetExpr, out: &mut Vec<usize>) {
    match expr {
        SetExpr::Sample(i) => out.push(*i),
        SetExpr::Op(_, a, b) => {
            leaf_samples(a, out);
            leaf_samples(b, out);
        }
    }
}

#[derive(Serialize)]
struct Neighbor {
    index: usize,
    distance: f64,
    iou: f64,
    labels: Vec<usize>,
}

#[derive(Serialize)]
struct ComposeReport {
    expression: String,
    route: RouteKind,
    expected_labels: Vec<usize>,
    neighbors: Vec<Neighbor>,
}

pub fn compose(a: ComposeArgs) -> Result<()> {
    let expr = parse_expr(&a.expr)?;
    let bank = load_bank_at(&a.bank)?;
    let model = a.model.as_deref().map(load_model_at).transpose()?;
    let route_kind: RouteKind = match &a.route {
        Some(s) => parse_enum("route", s)?,
        None if model.is_some() => RouteKind::Learned,
        None => RouteKind::Analytic,
    };
    let variant: AnalyticVariant = match &a.variant {
        Some(s) => parse_enum("analytic variant", s)?,
        None => AnalyticVariant::MinMax,
    };
    let dist: DistanceKind = match &a.distance {
        Some(s) => parse_enum("distance", s)?,
        None => DistanceKind::SqEuclidean,
    };
    let route = match route_kind {
        RouteKind::Learned => OpRoute::Learned(
            model
                .as_ref()
                .context("--route learned needs --model")?,
        ),
        RouteKind::Analytic => OpRoute::Analytic(variant),
    };

    let (vector, expected) = laso_core::nets::compose_expression(&expr, &bank, &route)?;
    let mut sources = Vec::new();
    leaf_samples(&expr, &mut sources);

    let mut ranked: Vec<(f64, usize)> = (0..bank.n())
        .filter(|i| !sources.contains(i))
        .map(|i| (distance(dist, &vector, bank.feature(i)), i))
        .collect();
    if a.k == 0 || a.k > ranked.len() {
        bail!("k={} with only {} candidate samples", a.k, ranked.len());
    }
    ranked.sort_by(|x, y| x.0.total_cmp(&y.0).then(x.1.cmp(&y.1)));
    let mut neighbors = Vec::with_capacity(a.k);
    for &(d, i) in &ranked[..a.k] {
        let labels = bank.label_vec(i);
        neighbors.push(Neighbor {
            index: i,
            distance: d,
            iou: iou(&expected, &labels)?,
            labels: labels.indices(),
        });
    }

    let report = ComposeReport {
        expression: a.expr.clone(),
        route: route_kind,
        expected_labels: expected.indices(),
        neighbors,
    };
    println!("{}", serde_json::to_string_pretty(&report)?);
    if let Some(dir) = &a.out_dir {
        out_dir(dir)?;
        write_json(&dir.join("compose.json"), &report)?;
        write_resolved(
            &dir.join("resolved_config.json"),
            "compose",
            serde_json::json!({ "bank": a.bank, "model": a.model, "out_dir": dir }),
            &serde_json::json!({
                "expression": a.expr,
                "route": route_kind,
                "variant": variant,
                "k": a.k,
                "distance": dist,
            }),
        )?;
    }
    Ok(())
}
