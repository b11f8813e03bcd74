//! The operator training loop and the few-shot augmentation benchmark.
//!
//! Training alternates per batch between a classifier update (on real paired
//! features only) and an operator update through the frozen classifier, so
//! the two parameter groups never mix gradients. The benchmark builds label-
//! balanced support episodes over the reserved pool, synthesizes extra
//! samples per training epoch with one of several policies, trains a fresh
//! linear classifier per episode and method, and reports unseen-label mAP on
//! the full test split.

use rand::rngs::StdRng;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_distr::{Beta, Distribution};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Adam, PlateauScheduler, Tape, Tensor};
use crate::eval::average_precision;
use crate::losses::{self, LossWeights, PairBatch, PairSource, StepMasks};
use crate::nets::{AnalyticVariant, LasoModel, LinearClassifier, OpKind, OpRoute};
use crate::synth::{FeatureBank, SplitTag};
use crate::{Error, Result};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub depth: usize,
    pub dropout: f64,
    pub leaky_slope: f64,
    pub batch: usize,
    pub lr: f64,
    /// Classifier-only warmup epochs before the alternating phase.
    pub pretrain_epochs: usize,
    pub epochs: usize,
    pub weights: LossWeights,
    /// Square the symmetry penalty norms instead of using plain norms.
    pub square_sym: bool,
    pub plateau_factor: f64,
    pub plateau_patience: usize,
    pub plateau_min_improvement: f64,
    /// Fraction of training pairs that are (X, X) identity pairs.
    pub self_pair_fraction: f64,
    /// Fraction of distinct pairs that get a shared third sample mixed into
    /// both sides, with the union labels that additive features imply.
    pub shared_overlay_fraction: f64,
    /// Seeds model init directly and the data/dropout stream via seed+1.
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            depth: 3,
            dropout: 0.3,
            leaky_slope: 0.01,
            batch: 16,
            lr: 1e-3,
            pretrain_epochs: 10,
            epochs: 30,
            weights: LossWeights::default(),
            square_sym: false,
            plateau_factor: 0.3,
            plateau_patience: 5,
            plateau_min_improvement: 1e-4,
            self_pair_fraction: 0.15,
            shared_overlay_fraction: 0.25,
            seed: 42,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::InvalidConfig { msg });
        if self.batch < 2 {
            return fail("batch must be >= 2 (batch norm needs two rows)".into());
        }
        if self.lr <= 0.0 {
            return fail(format!("lr {} must be positive", self.lr));
        }
        if !(0.0 < self.plateau_factor && self.plateau_factor <= 1.0) {
            return fail(format!(
                "plateau factor {} outside (0, 1]",
                self.plateau_factor
            ));
        }
        if !(0.0..=1.0).contains(&self.self_pair_fraction) {
            return fail(format!(
                "self pair fraction {} outside [0, 1]",
                self.self_pair_fraction
            ));
        }
        if !(0.0..=1.0).contains(&self.shared_overlay_fraction) {
            return fail(format!(
                "shared overlay fraction {} outside [0, 1]",
                self.shared_overlay_fraction
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub phase: &'static str,
    pub classifier_loss: f64,
    pub laso_loss: f64,
    pub sym_loss: f64,
    pub mc_loss: f64,
    pub total_loss: f64,
    pub lr: f64,
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct TrainLog {
    pub epochs: Vec<EpochLog>,
}

impl TrainLog {
    pub fn to_csv(&self) -> String {
        let mut out =
            String::from("epoch,phase,classifier_loss,laso_loss,sym_loss,mc_loss,total_loss,lr\n");
        for e in &self.epochs {
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{}\n",
                e.epoch,
                e.phase,
                e.classifier_loss,
                e.laso_loss,
                e.sym_loss,
                e.mc_loss,
                e.total_loss,
                e.lr
            ));
        }
        out
    }
}

/// Owns the model and both optimizers; exposes the two step kinds separately
/// so callers can checkpoint parameter state between phases.
pub struct LasoTrainer {
    pub model: LasoModel,
    pub cfg: TrainConfig,
    opt_classifier: Adam,
    opt_operators: Adam,
    rng: StdRng,
}

impl LasoTrainer {
    pub fn new(d: usize, l: usize, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let model = LasoModel::new(d, l, cfg.depth, cfg.dropout, cfg.leaky_slope, cfg.seed)?;
        Self::from_model(model, cfg)
    }

    /// Resume from an existing model (for example a checkpoint whose
    /// classifier is already trained). Optimizer state starts fresh.
    pub fn from_model(model: LasoModel, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let opt_classifier = Adam::new(model.classifier_params(), cfg.lr);
        let opt_operators = Adam::new(model.operator_params(), cfg.lr);
        let rng = StdRng::seed_from_u64(cfg.seed.wrapping_add(1));
        Ok(LasoTrainer {
            model,
            cfg,
            opt_classifier,
            opt_operators,
            rng,
        })
    }

    /// Fresh matching over the train split. Most pairs are distinct samples,
    /// most of those steered toward a label-sharing partner: under a uniform
    /// label draw, plain random matching leaves most intersections empty,
    /// which starves the intersection operator of nonempty targets. A small
    /// fraction are identity pairs (X,X), whose targets X, X and the empty
    /// set are exact and teach the operators to preserve content they were
    /// never labeled on. Another slice of the distinct pairs gets a shared
    /// third sample overlaid on both sides, so the nets also practice the
    /// keep-what-is-common, drop-what-is-private decision on composites that
    /// match no single bank sample.
    pub fn epoch_matching(&mut self, bank: &FeatureBank) -> Result<Vec<PairSource>> {
        let mut pool = bank.split_indices(SplitTag::Train);
        if pool.len() < 2 {
            return Err(Error::EmptyPool {
                what: "train split",
            });
        }
        let overlay_pool = pool.clone();
        pool.shuffle(&mut self.rng);
        pool.truncate(pool.len() & !1);
        let shares = |a: usize, b: usize| {
            bank.label_row(a)
                .iter()
                .zip(bank.label_row(b))
                .any(|(&x, &y)| x == 1 && y == 1)
        };
        let mut pairs = Vec::with_capacity(pool.len() / 2);
        while let Some(a) = pool.pop() {
            if pool.is_empty() || self.rng.random_bool(self.cfg.self_pair_fraction) {
                pairs.push(PairSource::Pair(a, a));
                continue;
            }
            // pool is shuffled, so the last element is a uniform partner
            let mut pick = pool.len() - 1;
            if self.rng.random_bool(0.75) {
                let lo = pool.len().saturating_sub(128);
                for c in (lo..pool.len()).rev() {
                    if shares(a, pool[c]) {
                        pick = c;
                        break;
                    }
                }
            }
            let b = pool.swap_remove(pick);
            if self.rng.random_bool(self.cfg.shared_overlay_fraction) {
                let shared = overlay_pool[self.rng.random_range(0..overlay_pool.len())];
                pairs.push(PairSource::SharedOverlay {
                    x: a,
                    y: b,
                    shared,
                    alpha_x: self.rng.random_range(0.6..=1.2),
                    alpha_y: self.rng.random_range(0.6..=1.2),
                });
            } else {
                pairs.push(PairSource::Pair(a, b));
            }
        }
        Ok(pairs)
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.opt_classifier.set_lr(lr);
        self.opt_operators.set_lr(lr);
    }

    pub fn step_classifier(&mut self, batch: &PairBatch) -> Result<f64> {
        let mut tape = Tape::new();
        let loss = losses::classifier_loss(
            &mut tape,
            &self.model.classifier,
            &batch.fx,
            &batch.fy,
            &batch.t_x,
            &batch.t_y,
        )?;
        let value = loss.item();
        if !value.is_finite() {
            return Err(Error::NonFinite {
                context: "classifier loss".into(),
            });
        }
        self.opt_classifier.zero_grad();
        tape.backward(&loss)?;
        self.opt_classifier.step()?;
        Ok(value)
    }

    /// One operator update: all forwards share this step's dropout masks,
    /// and the classifier is consulted only through frozen copies.
    pub fn step_operators(&mut self, batch: &PairBatch) -> Result<OperatorStepLoss> {
        let masks = StepMasks::draw(&self.model, batch.rows, &mut self.rng);
        let mut tape = Tape::new();
        let fwd = losses::operator_forwards_train(
            &mut self.model,
            &mut tape,
            &batch.fx,
            &batch.fy,
            &masks,
        )?;
        let laso = losses::laso_loss(
            &mut tape,
            &self.model.classifier,
            &fwd,
            &batch.t_int,
            &batch.t_uni,
            &batch.t_sub,
        )?;
        let sym = losses::sym_loss(&mut tape, &fwd, self.model.d, self.cfg.square_sym)?;
        let mc = losses::mc_loss(&mut tape, &fwd, &batch.fx, &batch.fy)?;
        let total = losses::total_operator_loss(&mut tape, &laso, &sym, &mc, &self.cfg.weights)?;
        let out = OperatorStepLoss {
            laso: laso.item(),
            sym: sym.item(),
            mc: mc.item(),
            total: total.item(),
        };
        if !out.total.is_finite() {
            return Err(Error::NonFinite {
                context: "operator loss".into(),
            });
        }
        self.opt_operators.zero_grad();
        tape.backward(&total)?;
        self.opt_operators.step()?;
        Ok(out)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct OperatorStepLoss {
    pub laso: f64,
    pub sym: f64,
    pub mc: f64,
    pub total: f64,
}

impl LasoTrainer {
    /// Full training run: classifier warmup, then per-batch alternation of
    /// the two update kinds, with a plateau scheduler driven by the combined
    /// epoch loss of the alternating phase.
    pub fn run(&mut self, bank: &FeatureBank) -> Result<TrainLog> {
        if bank.d != self.model.d || bank.l != self.model.l {
            return Err(Error::ShapeMismatch {
                op: "train",
                lhs: vec![self.model.d, self.model.l],
                rhs: vec![bank.d, bank.l],
            });
        }
        let cfg = self.cfg.clone();
        let cfg = &cfg;
        let mut log = TrainLog::default();
        let mut epoch = 0usize;

        for _ in 0..cfg.pretrain_epochs {
            let pairs = self.epoch_matching(bank)?;
            let mut sum = 0.0;
            let mut batches = 0usize;
            for chunk in pairs.chunks(cfg.batch) {
                if chunk.len() < 2 {
                    continue;
                }
                let batch = losses::build_mixed_batch(bank, chunk)?;
                sum += self.step_classifier(&batch)?;
                batches += 1;
            }
            let mean = sum / batches.max(1) as f64;
            log.epochs.push(EpochLog {
                epoch,
                phase: "pretrain",
                classifier_loss: mean,
                laso_loss: 0.0,
                sym_loss: 0.0,
                mc_loss: 0.0,
                total_loss: mean,
                lr: cfg.lr,
            });
            epoch += 1;
        }

        let mut sched = PlateauScheduler::new(
            cfg.lr,
            cfg.plateau_factor,
            cfg.plateau_patience,
            cfg.plateau_min_improvement,
        );
        for _ in 0..cfg.epochs {
            let pairs = self.epoch_matching(bank)?;
            let mut sums = (0.0, 0.0, 0.0, 0.0, 0.0);
            let mut batches = 0usize;
            for chunk in pairs.chunks(cfg.batch) {
                if chunk.len() < 2 {
                    continue;
                }
                let batch = losses::build_mixed_batch(bank, chunk)?;
                let c = self.step_classifier(&batch)?;
                let op = self.step_operators(&batch)?;
                sums.0 += c;
                sums.1 += op.laso;
                sums.2 += op.sym;
                sums.3 += op.mc;
                sums.4 += c + op.total;
                batches += 1;
            }
            let n = batches.max(1) as f64;
            let combined = sums.4 / n;
            let lr = sched.step(combined);
            self.set_lr(lr);
            log.epochs.push(EpochLog {
                epoch,
                phase: "main",
                classifier_loss: sums.0 / n,
                laso_loss: sums.1 / n,
                sym_loss: sums.2 / n,
                mc_loss: sums.3 / n,
                total_loss: combined,
                lr,
            });
            epoch += 1;
        }

        Ok(log)
    }
}

pub fn train_laso(bank: &FeatureBank, cfg: &TrainConfig) -> Result<(LasoModel, TrainLog)> {
    let mut trainer = LasoTrainer::new(bank.d, bank.l, cfg.clone())?;
    let log = trainer.run(bank)?;
    Ok((trainer.model, log))
}

// --- episodes ----------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Episode {
    pub n_shot: usize,
    pub support: Vec<usize>,
    /// Entire test split; evaluation restricts annotations to unseen labels.
    pub query: Vec<usize>,
    /// (unseen label, achieved support count), ascending by label.
    pub counts: Vec<(usize, usize)>,
}

/// Greedy pass over the seed-shuffled reserved pool: a sample is admitted
/// iff it carries at least one unseen label still short of `n_shot`. Counts
/// may overshoot by the other labels of an admitted sample.
pub fn build_episode(bank: &FeatureBank, n_shot: usize, seed: u64) -> Result<Episode> {
    if n_shot == 0 {
        return Err(Error::InvalidConfig {
            msg: "n_shot must be positive".into(),
        });
    }
    let unseen = bank.unseen_indices();
    if unseen.is_empty() {
        return Err(Error::EmptyPool {
            what: "unseen labels",
        });
    }
    let mut pool = bank.split_indices(SplitTag::Aux);
    if pool.is_empty() {
        return Err(Error::EmptyPool {
            what: "reserved unseen-label pool",
        });
    }
    let mut rng = StdRng::seed_from_u64(seed);
    pool.shuffle(&mut rng);

    let mut counts = vec![0usize; bank.l];
    let mut support = Vec::new();
    let mut short = unseen.len();
    for &i in &pool {
        if short == 0 {
            break;
        }
        let row = bank.label_row(i);
        let admits = unseen.iter().any(|&k| row[k] == 1 && counts[k] < n_shot);
        if !admits {
            continue;
        }
        for &k in &unseen {
            if row[k] == 1 {
                counts[k] += 1;
                if counts[k] == n_shot {
                    short -= 1;
                }
            }
        }
        support.push(i);
    }
    if short > 0 {
        let &label = unseen
            .iter()
            .find(|&&k| counts[k] < n_shot)
            .expect("some label is short");
        return Err(Error::StarvedLabel {
            label,
            needed: n_shot,
            got: counts[label],
        });
    }
    Ok(Episode {
        n_shot,
        support,
        query: bank.split_indices(SplitTag::Test),
        counts: unseen.iter().map(|&k| (k, counts[k])).collect(),
    })
}

// --- augmentation synthesis ----------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AugMethod {
    None,
    Mixup,
    AnalyticInt,
    AnalyticUni,
    LearnedInt,
    LearnedUni,
    LearnedSub,
}

impl AugMethod {
    fn op_kind(self) -> Option<(OpKind, bool)> {
        // (operator, learned?)
        match self {
            AugMethod::None | AugMethod::Mixup => None,
            AugMethod::AnalyticInt => Some((OpKind::Intersection, false)),
            AugMethod::AnalyticUni => Some((OpKind::Union, false)),
            AugMethod::LearnedInt => Some((OpKind::Intersection, true)),
            AugMethod::LearnedUni => Some((OpKind::Union, true)),
            AugMethod::LearnedSub => Some((OpKind::Subtraction, true)),
        }
    }

    pub fn needs_model(self) -> bool {
        matches!(self.op_kind(), Some((_, true)))
    }
}

impl std::fmt::Display for AugMethod {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            AugMethod::None => "none",
            AugMethod::Mixup => "mixup",
            AugMethod::AnalyticInt => "analytic_int",
            AugMethod::AnalyticUni => "analytic_uni",
            AugMethod::LearnedInt => "learned_int",
            AugMethod::LearnedUni => "learned_uni",
            AugMethod::LearnedSub => "learned_sub",
        })
    }
}

impl std::str::FromStr for AugMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "none" => AugMethod::None,
            "mixup" => AugMethod::Mixup,
            "analytic_int" => AugMethod::AnalyticInt,
            "analytic_uni" => AugMethod::AnalyticUni,
            "learned_int" => AugMethod::LearnedInt,
            "learned_uni" => AugMethod::LearnedUni,
            "learned_sub" => AugMethod::LearnedSub,
            other => {
                return Err(Error::InvalidArg {
                    op: "aug_method",
                    msg: format!("unknown method `{other}`"),
                })
            }
        })
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AugmentationPolicy {
    pub method: AugMethod,
    /// Samples to synthesize (per training epoch in the benchmark).
    pub count: usize,
    /// Redraw pairs whose target restricted to the mask is empty.
    pub skip_empty_targets: bool,
    pub mixup_alpha: f64,
}

/// A synthesized training sample; targets are full-width and may be soft
/// (mixup).
#[derive(Debug, Clone)]
pub struct SynthSample {
    pub feature: Vec<f64>,
    pub target: Vec<f64>,
}

/// Draws random support pairs and applies the policy's operation. Emits
/// exactly `policy.count` samples; when skipping empty targets, pairs are
/// redrawn up to a bounded number of attempts, after which empty targets
/// are admitted rather than looping forever.
pub fn synthesize_augmentations(
    policy: &AugmentationPolicy,
    bank: &FeatureBank,
    support: &[usize],
    route: &OpRoute,
    skip_mask: &[bool],
    rng: &mut StdRng,
) -> Result<Vec<SynthSample>> {
    if policy.method == AugMethod::None || policy.count == 0 {
        return Ok(Vec::new());
    }
    if support.len() < 2 {
        return Err(Error::InvalidArg {
            op: "synthesize_augmentations",
            msg: format!("support has {} samples, need at least 2", support.len()),
        });
    }
    if policy.method.needs_model() && !matches!(route, OpRoute::Learned(_)) {
        return Err(Error::InvalidArg {
            op: "synthesize_augmentations",
            msg: format!("method {} needs a trained model", policy.method),
        });
    }
    let l = bank.l;
    let mixup = if policy.method == AugMethod::Mixup {
        Some(
            Beta::new(policy.mixup_alpha, policy.mixup_alpha).map_err(|e| {
                Error::InvalidConfig {
                    msg: format!("mixup alpha {}: {e}", policy.mixup_alpha),
                }
            })?,
        )
    } else {
        None
    };

    let mut out = Vec::with_capacity(policy.count);
    let mut attempts_left = 50 * policy.count + 100;
    while out.len() < policy.count {
        let i = support[rng.random_range(0..support.len())];
        let j = loop {
            let j = support[rng.random_range(0..support.len())];
            if j != i || support.len() == 1 {
                break j;
            }
        };
        let (fx, fy) = (bank.feature(i), bank.feature(j));
        let (lx, ly) = (bank.label_vec(i), bank.label_vec(j));
        let sample = if let Some(beta) = &mixup {
            let lam: f64 = beta.sample(rng);
            let feature = fx
                .iter()
                .zip(fy)
                .map(|(&a, &b)| lam * a + (1.0 - lam) * b)
                .collect();
            let target = (0..l)
                .map(|k| {
                    lam * f64::from(u8::from(lx.get(k)))
                        + (1.0 - lam) * f64::from(u8::from(ly.get(k)))
                })
                .collect();
            SynthSample { feature, target }
        } else {
            let (kind, _) = policy.method.op_kind().expect("mixup/none handled above");
            let feature = route.apply_rows(kind, fx, fy, 1, bank.d)?;
            let set = match kind {
                OpKind::Intersection => crate::labels::set_intersection(&lx, &ly)?,
                OpKind::Union => crate::labels::set_union(&lx, &ly)?,
                OpKind::Subtraction => crate::labels::set_subtraction(&lx, &ly)?,
            };
            SynthSample {
                feature,
                target: set.as_f64(),
            }
        };
        if policy.skip_empty_targets && attempts_left > 0 {
            let visible = sample
                .target
                .iter()
                .zip(skip_mask)
                .any(|(&t, &m)| m && t > 0.0);
            attempts_left -= 1;
            if !visible {
                continue;
            }
        }
        out.push(sample);
    }
    Ok(out)
}

// --- benchmark -----------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct BenchmarkConfig {
    pub methods: Vec<AugMethod>,
    pub n_shot: usize,
    pub episodes: usize,
    pub epochs: usize,
    pub classifier_lr: f64,
    pub batch: usize,
    /// Synthesized samples per training epoch = this factor times the
    /// support-set size; identical across methods by construction.
    pub synth_per_support: usize,
    pub skip_empty_targets: bool,
    pub mixup_alpha: f64,
    pub analytic_variant: AnalyticVariant,
    pub seed: u64,
}

impl Default for BenchmarkConfig {
    fn default() -> Self {
        BenchmarkConfig {
            methods: vec![
                AugMethod::None,
                AugMethod::Mixup,
                AugMethod::AnalyticInt,
                AugMethod::AnalyticUni,
                AugMethod::LearnedInt,
                AugMethod::LearnedUni,
            ],
            n_shot: 1,
            episodes: 10,
            epochs: 40,
            classifier_lr: 0.01,
            batch: 16,
            synth_per_support: 4,
            skip_empty_targets: true,
            mixup_alpha: 0.2,
            analytic_variant: AnalyticVariant::MinMax,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct MethodStats {
    pub method: AugMethod,
    pub per_episode: Vec<f64>,
    pub mean: f64,
    /// Sample standard deviation over episodes (0 for a single episode).
    pub std: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct BenchmarkResult {
    pub n_shot: usize,
    pub episodes: usize,
    pub seed: u64,
    pub support_sizes: Vec<usize>,
    pub methods: Vec<MethodStats>,
}

impl BenchmarkResult {
    pub fn stats(&self, method: AugMethod) -> &MethodStats {
        self.methods
            .iter()
            .find(|m| m.method == method)
            .expect("method present")
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("episode,method,map\n");
        for m in &self.methods {
            for (e, v) in m.per_episode.iter().enumerate() {
                out.push_str(&format!("{},{},{}\n", e, m.method, v));
            }
        }
        out
    }
}

fn sgd_step(params: &[&Tensor], lr: f64) {
    for p in params {
        if let Some(g) = p.grad() {
            let mut vals = p.to_vec();
            for (v, gv) in vals.iter_mut().zip(&g) {
                *v -= lr * gv;
            }
            p.set_values(&vals);
        }
        p.zero_grad();
    }
}

/// Unseen-label mAP of `clf` (over `classes`) on the query set.
fn query_map(
    clf: &LinearClassifier,
    classes: &[usize],
    bank: &FeatureBank,
    query: &[usize],
) -> Result<f64> {
    let d = bank.d;
    let mut xs = Vec::with_capacity(query.len() * d);
    for &q in query {
        xs.extend_from_slice(bank.feature(q));
    }
    let mut tape = Tape::new();
    let x = Tensor::new(&[query.len(), d], xs)?;
    let scores = clf.scores(&mut tape, &x)?.to_vec();
    let c = classes.len();
    let mut sum = 0.0;
    let mut evaluated = 0usize;
    for (j, &k) in classes.iter().enumerate() {
        let col: Vec<f64> = (0..query.len()).map(|r| scores[r * c + j]).collect();
        let pos: Vec<bool> = query.iter().map(|&q| bank.label_row(q)[k] == 1).collect();
        if let Some(ap) = average_precision(&col, &pos) {
            sum += ap;
            evaluated += 1;
        }
    }
    if evaluated == 0 {
        return Err(Error::EmptyPool {
            what: "query positives",
        });
    }
    Ok(sum / evaluated as f64)
}

/// Runs every method on the same episodes with the same per-epoch synthesis
/// budget. The operator model is taken frozen (immutably) and is only used
/// to synthesize; each episode and method trains its own fresh linear
/// classifier over the unseen labels with plain SGD.
pub fn run_benchmark(
    bank: &FeatureBank,
    model: Option<&LasoModel>,
    cfg: &BenchmarkConfig,
) -> Result<BenchmarkResult> {
    if cfg.methods.is_empty() {
        return Err(Error::InvalidConfig {
            msg: "no benchmark methods given".into(),
        });
    }
    if cfg.methods.iter().any(|m| m.needs_model()) && model.is_none() {
        return Err(Error::InvalidConfig {
            msg: "learned methods need a trained operator model".into(),
        });
    }
    let classes = bank.unseen_indices();
    let unseen_mask: Vec<bool> = bank.seen_mask().iter().map(|&b| !b).collect();
    let (d, _) = (bank.d, bank.l);

    let episodes: Vec<Episode> = (0..cfg.episodes)
        .map(|e| build_episode(bank, cfg.n_shot, cfg.seed.wrapping_add(e as u64)))
        .collect::<Result<_>>()?;
    let mut per_method: Vec<Vec<f64>> = vec![Vec::with_capacity(cfg.episodes); cfg.methods.len()];

    for (e, episode) in episodes.iter().enumerate() {
        let count = cfg.synth_per_support * episode.support.len();
        for (mi, &method) in cfg.methods.iter().enumerate() {
            let route = if method.needs_model() {
                OpRoute::Learned(model.expect("checked above"))
            } else {
                OpRoute::Analytic(cfg.analytic_variant)
            };
            let policy = AugmentationPolicy {
                method,
                count: if method == AugMethod::None { 0 } else { count },
                skip_empty_targets: cfg.skip_empty_targets,
                mixup_alpha: cfg.mixup_alpha,
            };
            // One private stream per (episode, method): methods stay
            // comparable and insensitive to each other's draws.
            let mut rng = StdRng::seed_from_u64(
                cfg.seed
                    .wrapping_mul(0x9E37_79B9_7F4A_7C15)
                    .wrapping_add((e as u64) << 8)
                    .wrapping_add(mi as u64),
            );
            let clf = LinearClassifier::new(d, classes.len(), &mut rng);

            // Fixed support rows; synthesized rows are redrawn every epoch.
            let mut sup_rows = Vec::with_capacity(episode.support.len() * d);
            let mut sup_targets = Vec::with_capacity(episode.support.len() * classes.len());
            for &i in &episode.support {
                sup_rows.extend_from_slice(bank.feature(i));
                let row = bank.label_row(i);
                sup_targets.extend(classes.iter().map(|&k| f64::from(row[k])));
            }

            for _ in 0..cfg.epochs {
                let synth = synthesize_augmentations(
                    &policy,
                    bank,
                    &episode.support,
                    &route,
                    &unseen_mask,
                    &mut rng,
                )?;
                let total_rows = episode.support.len() + synth.len();
                let mut feats = sup_rows.clone();
                let mut targets = sup_targets.clone();
                for s in &synth {
                    feats.extend_from_slice(&s.feature);
                    targets.extend(classes.iter().map(|&k| s.target[k]));
                }
                let mut order: Vec<usize> = (0..total_rows).collect();
                order.shuffle(&mut rng);
                for chunk in order.chunks(cfg.batch) {
                    let rows = chunk.len();
                    let mut bx = Vec::with_capacity(rows * d);
                    let mut bt = Vec::with_capacity(rows * classes.len());
                    for &r in chunk {
                        bx.extend_from_slice(&feats[r * d..(r + 1) * d]);
                        bt.extend_from_slice(&targets[r * classes.len()..(r + 1) * classes.len()]);
                    }
                    let mut tape = Tape::new();
                    let x = Tensor::new(&[rows, d], bx)?;
                    let s = clf.scores(&mut tape, &x)?;
                    let loss = tape.bce_with_logits(&s, &bt)?;
                    if !loss.item().is_finite() {
                        return Err(Error::NonFinite {
                            context: format!("episode {e} method {method} classifier loss"),
                        });
                    }
                    tape.backward(&loss)?;
                    sgd_step(&[&clf.weight, &clf.bias], cfg.classifier_lr);
                }
            }
            per_method[mi].push(query_map(&clf, &classes, bank, &episode.query)?);
        }
    }

    let methods = cfg
        .methods
        .iter()
        .zip(per_method)
        .map(|(&method, per_episode)| {
            let n = per_episode.len() as f64;
            let mean = per_episode.iter().sum::<f64>() / n;
            let std = if per_episode.len() > 1 {
                (per_episode
                    .iter()
                    .map(|v| (v - mean) * (v - mean))
                    .sum::<f64>()
                    / (n - 1.0))
                    .sqrt()
            } else {
                0.0
            };
            MethodStats {
                method,
                per_episode,
                mean,
                std,
            }
        })
        .collect();
    Ok(BenchmarkResult {
        n_shot: cfg.n_shot,
        episodes: cfg.episodes,
        seed: cfg.seed,
        support_sizes: episodes.iter().map(|e| e.support.len()).collect(),
        methods,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::labels::LabelVec;
    use crate::synth::{bank_from_label_sets, generate_bank, GeneratorSpec};

    #[test]
    fn single_label_episode_is_exactly_one_per_label() {
        // Aux pool of single-label samples over 4 unseen labels.
        let l = 6;
        let seen = vec![true, true, false, false, false, false];
        let mut sets = Vec::new();
        let mut splits = Vec::new();
        for _ in 0..3 {
            for k in 2..l {
                sets.push(LabelVec::from_indices(l, &[k]));
                splits.push(SplitTag::Aux);
            }
        }
        for k in 0..l {
            sets.push(LabelVec::from_indices(l, &[k]));
            splits.push(SplitTag::Test);
        }
        let spec = GeneratorSpec::clean_disjoint(12, l, 2);
        let bank = bank_from_label_sets(&spec, &sets, splits, seen).unwrap();

        let ep = build_episode(&bank, 1, 9).unwrap();
        assert_eq!(ep.support.len(), 4);
        assert!(ep.counts.iter().all(|&(_, c)| c == 1));
        assert_eq!(ep.query, bank.split_indices(SplitTag::Test));
        assert_eq!(build_episode(&bank, 1, 9).unwrap(), ep);
        assert_ne!(build_episode(&bank, 1, 10).unwrap().support, ep.support);

        // Asking for more shots than the pool holds starves a label.
        match build_episode(&bank, 4, 9) {
            Err(Error::StarvedLabel {
                needed: 4, got: 3, ..
            }) => {}
            other => panic!("expected starved label, got {other:?}"),
        }
    }

    #[test]
    fn multi_label_support_can_overshoot_by_shared_samples() {
        let bank = generate_bank(&GeneratorSpec::default(), 3200, 11).unwrap();
        let ep = build_episode(&bank, 5, 3).unwrap();
        for &(k, c) in &ep.counts {
            assert!(c >= 5, "label {k} has {c} < 5");
        }
        assert!(ep.counts.iter().any(|&(_, c)| c >= 5));
        // Every support sample was admitted for some unseen label.
        let unseen = bank.unseen_indices();
        for &i in &ep.support {
            assert!(unseen.iter().any(|&k| bank.label_row(i)[k] == 1));
        }
    }

    #[test]
    fn synthesis_counts_and_labels() {
        let spec = GeneratorSpec::clean_disjoint(16, 4, 2);
        let bank = generate_bank(&spec, 80, 5).unwrap();
        let support: Vec<usize> = (0..10).collect();
        let all = vec![true; 4];
        let mut rng = StdRng::seed_from_u64(1);
        let route = OpRoute::Analytic(AnalyticVariant::MinMax);

        let none = AugmentationPolicy {
            method: AugMethod::None,
            count: 32,
            skip_empty_targets: true,
            mixup_alpha: 0.2,
        };
        assert!(
            synthesize_augmentations(&none, &bank, &support, &route, &all, &mut rng)
                .unwrap()
                .is_empty()
        );

        let uni = AugmentationPolicy {
            method: AugMethod::AnalyticUni,
            count: 40,
            ..none.clone()
        };
        let layout = spec.block_layout().unwrap();
        let samples =
            synthesize_augmentations(&uni, &bank, &support, &route, &all, &mut rng).unwrap();
        assert_eq!(samples.len(), 40);
        for s in &samples {
            let decoded = crate::synth::oracle_decode(&layout, &s.feature, 0.5).unwrap();
            assert_eq!(
                decoded.as_f64(),
                s.target,
                "union feature decodes to its label"
            );
        }

        let mix = AugmentationPolicy {
            method: AugMethod::Mixup,
            count: 25,
            ..none.clone()
        };
        let samples =
            synthesize_augmentations(&mix, &bank, &support, &route, &all, &mut rng).unwrap();
        assert_eq!(samples.len(), 25);
        for s in &samples {
            assert!(s.target.iter().all(|&t| (0.0..=1.0).contains(&t)));
            assert!(s.feature.iter().all(|&v| v.is_finite()));
        }

        // Learned methods insist on a learned route.
        let learned = AugmentationPolicy {
            method: AugMethod::LearnedUni,
            count: 4,
            ..none.clone()
        };
        assert!(
            synthesize_augmentations(&learned, &bank, &support, &route, &all, &mut rng).is_err()
        );
    }

    #[test]
    fn skip_empty_targets_redraws_when_possible() {
        // Supports: two samples sharing label 0 and one disjoint; with the
        // skip flag, intersections must all contain a visible label.
        let l = 4;
        let sets = vec![
            LabelVec::from_indices(l, &[0, 1]),
            LabelVec::from_indices(l, &[0, 2]),
            LabelVec::from_indices(l, &[3]),
        ];
        let spec = GeneratorSpec {
            labels_per_sample: (1, 2),
            ..GeneratorSpec::clean_disjoint(8, l, 3)
        };
        let bank = bank_from_label_sets(
            &spec,
            &sets,
            vec![SplitTag::Aux; 3],
            vec![true, true, true, false],
        )
        .unwrap();
        let policy = AugmentationPolicy {
            method: AugMethod::AnalyticInt,
            count: 30,
            skip_empty_targets: true,
            mixup_alpha: 0.2,
        };
        let all = vec![true; l];
        let mut rng = StdRng::seed_from_u64(3);
        let route = OpRoute::Analytic(AnalyticVariant::MinMax);
        let samples =
            synthesize_augmentations(&policy, &bank, &[0, 1, 2], &route, &all, &mut rng).unwrap();
        assert_eq!(samples.len(), 30);
        for s in &samples {
            assert!(s.target.iter().any(|&t| t > 0.0));
        }
    }

    #[test]
    fn trainer_phases_touch_disjoint_parameter_groups() {
        let spec = GeneratorSpec {
            d: 12,
            l: 5,
            seen_count: 4,
            ..GeneratorSpec::default()
        };
        let bank = generate_bank(&spec, 64, 13).unwrap();
        let cfg = TrainConfig {
            batch: 8,
            pretrain_epochs: 0,
            epochs: 1,
            ..TrainConfig::default()
        };
        let mut trainer = LasoTrainer::new(bank.d, bank.l, cfg).unwrap();
        let pairs = trainer.epoch_matching(&bank).unwrap();
        let batch = losses::build_mixed_batch(&bank, &pairs[..8]).unwrap();

        let ops_before = trainer.model.operators_checksum();
        let clf_before = trainer.model.classifier_checksum();
        trainer.step_classifier(&batch).unwrap();
        assert_eq!(trainer.model.operators_checksum(), ops_before);
        assert_ne!(trainer.model.classifier_checksum(), clf_before);

        let clf_mid = trainer.model.classifier_checksum();
        trainer.step_operators(&batch).unwrap();
        assert_eq!(trainer.model.classifier_checksum(), clf_mid);
        assert_ne!(trainer.model.operators_checksum(), ops_before);
    }

    #[test]
    fn short_training_runs_and_logs() {
        let spec = GeneratorSpec {
            d: 12,
            l: 5,
            seen_count: 4,
            ..GeneratorSpec::default()
        };
        let bank = generate_bank(&spec, 96, 29).unwrap();
        let cfg = TrainConfig {
            batch: 8,
            pretrain_epochs: 2,
            epochs: 3,
            ..TrainConfig::default()
        };
        let (model, log) = train_laso(&bank, &cfg).unwrap();
        assert_eq!(log.epochs.len(), 5);
        assert!(log.epochs.iter().all(|e| e.total_loss.is_finite()));
        assert_eq!(log.epochs[0].phase, "pretrain");
        assert_eq!(log.epochs[4].phase, "main");
        let csv = log.to_csv();
        assert_eq!(csv.lines().count(), 6);
        // Deterministic end-to-end.
        let (model2, _) = train_laso(&bank, &cfg).unwrap();
        assert_eq!(model.operators_checksum(), model2.operators_checksum());
        assert_eq!(model.classifier_checksum(), model2.classifier_checksum());
    }

    #[test]
    fn benchmark_is_reproducible_and_method_invariant() {
        let spec = GeneratorSpec {
            d: 16,
            l: 6,
            seen_count: 4,
            ..GeneratorSpec::default()
        };
        let bank = generate_bank(&spec, 320, 31).unwrap();
        let cfg = BenchmarkConfig {
            methods: vec![AugMethod::None, AugMethod::Mixup, AugMethod::AnalyticUni],
            n_shot: 1,
            episodes: 2,
            epochs: 4,
            seed: 5,
            ..BenchmarkConfig::default()
        };
        let res = run_benchmark(&bank, None, &cfg).unwrap();
        assert_eq!(res.methods.len(), 3);
        assert_eq!(res.support_sizes.len(), 2);
        for m in &res.methods {
            assert_eq!(m.per_episode.len(), 2);
            for &v in &m.per_episode {
                assert!((0.0..=1.0).contains(&v), "{} map {v}", m.method);
            }
        }
        let again = run_benchmark(&bank, None, &cfg).unwrap();
        for (a, b) in res.methods.iter().zip(&again.methods) {
            assert_eq!(a.per_episode, b.per_episode);
        }
        let csv = res.to_csv();
        assert_eq!(csv.lines().count(), 1 + 3 * 2);

        let learned_cfg = BenchmarkConfig {
            methods: vec![AugMethod::LearnedUni],
            ..cfg
        };
        assert!(run_benchmark(&bank, None, &learned_cfg).is_err());
    }
}
