//! Evaluation protocols over synthesized feature vectors: per-class average
//! precision / mAP for classification, and top-k max-IoU for nearest-neighbor
//! retrieval, both with seen/unseen breakdowns.
//!
//! Pairing protocol shared by both: shuffle the test split with a seeded RNG
//! and pair consecutive samples (a random perfect matching); an odd sample
//! count drops the last sample.

use rand::rngs::StdRng;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Adam, Tape, Tensor};
use crate::labels;
use crate::nets::{LinearClassifier, OpKind, OpRoute};
use crate::synth::{FeatureBank, SplitTag};
use crate::{Error, Result};

/// AP with descending-score ranking, ties broken by ascending index.
/// `None` when the class has no positives (undefined AP; callers skip and
/// report the class).
pub fn average_precision(scores: &[f64], positives: &[bool]) -> Option<f64> {
    assert_eq!(scores.len(), positives.len(), "AP input lengths");
    let p = positives.iter().filter(|&&b| b).count();
    if p == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut tp = 0usize;
    let mut sum_prec = 0.0;
    for (rank0, &i) in order.iter().enumerate() {
        if positives[i] {
            tp += 1;
            sum_prec += tp as f64 / (rank0 + 1) as f64;
        }
    }
    Some(sum_prec / p as f64)
}

/// Seeded random perfect matching over `indices`; returns the pairs and
/// whether an odd trailing sample was dropped.
pub fn perfect_matching(indices: &[usize], seed: u64) -> (Vec<(usize, usize)>, bool) {
    let mut idx = indices.to_vec();
    let mut rng = StdRng::seed_from_u64(seed);
    idx.shuffle(&mut rng);
    let dropped = idx.len() % 2 == 1;
    if dropped {
        idx.pop();
    }
    let pairs = idx.chunks_exact(2).map(|c| (c[0], c[1])).collect();
    (pairs, dropped)
}

/// Anything that can score feature rows against all L classes.
pub trait ScoreRows {
    fn classes(&self) -> usize;
    fn score_rows(&self, xs: &[f64], rows: usize) -> Result<Vec<f64>>;
}

impl ScoreRows for LinearClassifier {
    fn classes(&self) -> usize {
        self.dims().1
    }

    fn score_rows(&self, xs: &[f64], rows: usize) -> Result<Vec<f64>> {
        let (d, _) = self.dims();
        let mut tape = Tape::new();
        let x = Tensor::new(&[rows, d], xs.to_vec())?;
        Ok(self.scores(&mut tape, &x)?.to_vec())
    }
}

/// A classifier over an explicit subset of the label space, as trained for
/// unseen-label evaluation.
pub struct SubsetClassifier {
    pub classes: Vec<usize>,
    pub linear: LinearClassifier,
}

/// Full-width scorer that overlays subset-classifier columns on top of a
/// base classifier's scores.
pub struct CompositeScorer<'a> {
    pub base: &'a LinearClassifier,
    pub overlay: Option<&'a SubsetClassifier>,
}

impl ScoreRows for CompositeScorer<'_> {
    fn classes(&self) -> usize {
        self.base.dims().1
    }

    fn score_rows(&self, xs: &[f64], rows: usize) -> Result<Vec<f64>> {
        let l = self.classes();
        let mut scores = self.base.score_rows(xs, rows)?;
        if let Some(sub) = self.overlay {
            let over = sub.linear.score_rows(xs, rows)?;
            let c = sub.classes.len();
            for r in 0..rows {
                for (j, &k) in sub.classes.iter().enumerate() {
                    scores[r * l + k] = over[r * c + j];
                }
            }
        }
        Ok(scores)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalOp {
    Original,
    Intersection,
    Union,
    Subtraction,
}

impl From<OpKind> for EvalOp {
    fn from(k: OpKind) -> Self {
        match k {
            OpKind::Intersection => EvalOp::Intersection,
            OpKind::Union => EvalOp::Union,
            OpKind::Subtraction => EvalOp::Subtraction,
        }
    }
}

impl std::fmt::Display for EvalOp {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            EvalOp::Original => "original",
            EvalOp::Intersection => "intersection",
            EvalOp::Union => "union",
            EvalOp::Subtraction => "subtraction",
        })
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct ClassAp {
    pub class: usize,
    pub positives: usize,
    pub ap: Option<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct OpEvalRow {
    pub op: EvalOp,
    /// Scored examples behind every AP in this row.
    pub rows: usize,
    pub per_class: Vec<ClassAp>,
    pub map_all: Option<f64>,
    pub map_seen: Option<f64>,
    pub map_unseen: Option<f64>,
    pub evaluated_seen: usize,
    pub evaluated_unseen: usize,
    pub skipped_classes: Vec<usize>,
}

impl OpEvalRow {
    /// Mean positive rate over the classes selected by `pick` that carried a
    /// defined AP: the expected mAP of a constant scorer.
    pub fn mean_prevalence(&self, pick: impl Fn(usize) -> bool) -> Option<f64> {
        let vals: Vec<f64> = self
            .per_class
            .iter()
            .filter(|c| c.ap.is_some() && pick(c.class))
            .map(|c| c.positives as f64 / self.rows as f64)
            .collect();
        if vals.is_empty() {
            None
        } else {
            Some(vals.iter().sum::<f64>() / vals.len() as f64)
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct EvalReport {
    pub n_pairs: usize,
    pub dropped_sample: bool,
    pub seen: Vec<bool>,
    pub rows: Vec<OpEvalRow>,
}

impl EvalReport {
    pub fn row(&self, op: EvalOp) -> &OpEvalRow {
        self.rows
            .iter()
            .find(|r| r.op == op)
            .expect("all ops present")
    }

    /// One CSV row per class per operation.
    pub fn per_class_csv(&self) -> String {
        let mut out = String::from("op,class,seen,rows,positives,ap\n");
        for row in &self.rows {
            for c in &row.per_class {
                let ap = c.ap.map(|v| v.to_string()).unwrap_or_default();
                out.push_str(&format!(
                    "{},{},{},{},{},{}\n",
                    row.op,
                    c.class,
                    u8::from(self.seen[c.class]),
                    row.rows,
                    c.positives,
                    ap
                ));
            }
        }
        out
    }

    pub fn summary_csv(&self) -> String {
        let mut out = String::from("op,subset,evaluated_classes,map\n");
        for row in &self.rows {
            let l = row.per_class.len();
            let all = l - row.skipped_classes.len();
            for (subset, evaluated, map) in [
                ("all", all, row.map_all),
                ("seen", row.evaluated_seen, row.map_seen),
                ("unseen", row.evaluated_unseen, row.map_unseen),
            ] {
                let map = map.map(|v| v.to_string()).unwrap_or_default();
                out.push_str(&format!("{},{},{},{}\n", row.op, subset, evaluated, map));
            }
        }
        out
    }
}

fn build_eval_row(
    op: EvalOp,
    scores: &[f64],
    targets: &[bool],
    rows: usize,
    l: usize,
    seen: &[bool],
) -> OpEvalRow {
    let mut per_class = Vec::with_capacity(l);
    let mut skipped = Vec::new();
    let mut sums = [(0.0, 0usize); 3];
    for k in 0..l {
        let col: Vec<f64> = (0..rows).map(|r| scores[r * l + k]).collect();
        let pos: Vec<bool> = (0..rows).map(|r| targets[r * l + k]).collect();
        let positives = pos.iter().filter(|&&b| b).count();
        let ap = average_precision(&col, &pos);
        match ap {
            Some(v) => {
                sums[0].0 += v;
                sums[0].1 += 1;
                let sub = if seen[k] { 1 } else { 2 };
                sums[sub].0 += v;
                sums[sub].1 += 1;
            }
            None => skipped.push(k),
        }
        per_class.push(ClassAp {
            class: k,
            positives,
            ap,
        });
    }
    let mean = |(s, n): (f64, usize)| (n > 0).then(|| s / n as f64);
    OpEvalRow {
        op,
        rows,
        per_class,
        map_all: mean(sums[0]),
        map_seen: mean(sums[1]),
        map_unseen: mean(sums[2]),
        evaluated_seen: sums[1].1,
        evaluated_unseen: sums[2].1,
        skipped_classes: skipped,
    }
}

/// Pairs the test split, synthesizes all three operator outputs per pair,
/// scores them (plus the raw paired features) with `scorer`, and reports
/// per-class AP against the exact post-operation label sets.
pub fn classification_eval(
    scorer: &dyn ScoreRows,
    route: &OpRoute,
    bank: &FeatureBank,
    pairing_seed: u64,
) -> Result<EvalReport> {
    let (d, l) = (bank.d, bank.l);
    if scorer.classes() != l {
        return Err(Error::LengthMismatch {
            op: "classification_eval",
            lhs: scorer.classes(),
            rhs: l,
        });
    }
    let test = bank.split_indices(SplitTag::Test);
    let (pairs, dropped) = perfect_matching(&test, pairing_seed);
    if pairs.is_empty() {
        return Err(Error::EmptyPool {
            what: "test split pairs",
        });
    }
    let n = pairs.len();
    let mut xs = Vec::with_capacity(n * d);
    let mut ys = Vec::with_capacity(n * d);
    let mut lx = Vec::with_capacity(n);
    let mut ly = Vec::with_capacity(n);
    for &(i, j) in &pairs {
        xs.extend_from_slice(bank.feature(i));
        ys.extend_from_slice(bank.feature(j));
        lx.push(bank.label_vec(i));
        ly.push(bank.label_vec(j));
    }

    let mut rows = Vec::with_capacity(4);
    let mut originals = xs.clone();
    originals.extend_from_slice(&ys);
    let mut orig_targets = Vec::with_capacity(2 * n * l);
    for set in lx.iter().chain(ly.iter()) {
        orig_targets.extend((0..l).map(|k| set.get(k)));
    }
    let orig_scores = scorer.score_rows(&originals, 2 * n)?;
    rows.push(build_eval_row(
        EvalOp::Original,
        &orig_scores,
        &orig_targets,
        2 * n,
        l,
        bank.seen_mask(),
    ));

    for kind in [OpKind::Intersection, OpKind::Union, OpKind::Subtraction] {
        let zs = route.apply_rows(kind, &xs, &ys, n, d)?;
        let mut targets = Vec::with_capacity(n * l);
        for (a, b) in lx.iter().zip(&ly) {
            let t = match kind {
                OpKind::Intersection => labels::set_intersection(a, b)?,
                OpKind::Union => labels::set_union(a, b)?,
                OpKind::Subtraction => labels::set_subtraction(a, b)?,
            };
            targets.extend((0..l).map(|k| t.get(k)));
        }
        let scores = scorer.score_rows(&zs, n)?;
        rows.push(build_eval_row(
            kind.into(),
            &scores,
            &targets,
            n,
            l,
            bank.seen_mask(),
        ));
    }

    Ok(EvalReport {
        n_pairs: n,
        dropped_sample: dropped,
        seen: bank.seen_mask().to_vec(),
        rows,
    })
}

/// Trains a linear classifier for the unseen labels on the bank's reserved
/// pool. That pool is disjoint from the operator-training split, and no
/// synthesized vectors are involved.
pub fn unseen_classifier_train(
    bank: &FeatureBank,
    epochs: usize,
    lr: f64,
    batch: usize,
    seed: u64,
) -> Result<SubsetClassifier> {
    let classes = bank.unseen_indices();
    if classes.is_empty() {
        return Err(Error::EmptyPool {
            what: "unseen labels",
        });
    }
    let pool = bank.split_indices(SplitTag::Aux);
    if pool.is_empty() {
        return Err(Error::EmptyPool {
            what: "reserved unseen-label pool",
        });
    }
    let (d, c) = (bank.d, classes.len());
    let mut rng = StdRng::seed_from_u64(seed);
    let linear = LinearClassifier::new(d, c, &mut rng);
    let mut opt = Adam::new(
        vec![
            ("unseen.weight".into(), linear.weight.clone()),
            ("unseen.bias".into(), linear.bias.clone()),
        ],
        lr,
    );
    let mut order = pool.clone();
    for _ in 0..epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(batch) {
            let rows = chunk.len();
            let mut xs = Vec::with_capacity(rows * d);
            let mut ts = Vec::with_capacity(rows * c);
            for &i in chunk {
                xs.extend_from_slice(bank.feature(i));
                let row = bank.label_row(i);
                ts.extend(classes.iter().map(|&k| f64::from(row[k])));
            }
            let mut tape = Tape::new();
            let x = Tensor::new(&[rows, d], xs)?;
            let s = linear.scores(&mut tape, &x)?;
            let loss = tape.bce_with_logits(&s, &ts)?;
            opt.zero_grad();
            tape.backward(&loss)?;
            opt.step()?;
        }
    }
    Ok(SubsetClassifier { classes, linear })
}

/// Mean of ||op(x,y) - op(y,x)|| / max(||op(x,y)||, 1e-12) over random test
/// pairs: how far a (nominally commutative) learned operator is from
/// argument-order invariance.
pub fn mean_relative_asymmetry(
    model: &crate::nets::LasoModel,
    bank: &FeatureBank,
    kind: OpKind,
    n_pairs: usize,
    seed: u64,
) -> Result<f64> {
    let test = bank.split_indices(SplitTag::Test);
    if test.len() < 2 {
        return Err(Error::EmptyPool { what: "test split" });
    }
    let mut rng = StdRng::seed_from_u64(seed);
    let d = bank.d;
    let mut xs = Vec::with_capacity(n_pairs * d);
    let mut ys = Vec::with_capacity(n_pairs * d);
    for _ in 0..n_pairs {
        let i = test[rand::Rng::random_range(&mut rng, 0..test.len())];
        let j = loop {
            let j = test[rand::Rng::random_range(&mut rng, 0..test.len())];
            if j != i {
                break j;
            }
        };
        xs.extend_from_slice(bank.feature(i));
        ys.extend_from_slice(bank.feature(j));
    }
    let fwd = model.apply_operator_rows(kind, &xs, &ys, n_pairs)?;
    let rev = model.apply_operator_rows(kind, &ys, &xs, n_pairs)?;
    let mut sum = 0.0;
    for r in 0..n_pairs {
        let a = &fwd[r * d..(r + 1) * d];
        let b = &rev[r * d..(r + 1) * d];
        let diff: f64 = a
            .iter()
            .zip(b)
            .map(|(&x, &y)| (x - y) * (x - y))
            .sum::<f64>()
            .sqrt();
        let norm: f64 = a.iter().map(|&x| x * x).sum::<f64>().sqrt();
        sum += diff / norm.max(1e-12);
    }
    Ok(sum / n_pairs as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistanceKind {
    SqEuclidean,
    Cosine,
}

impl std::str::FromStr for DistanceKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sq_euclidean" | "euclidean" => Ok(DistanceKind::SqEuclidean),
            "cosine" => Ok(DistanceKind::Cosine),
            other => Err(Error::InvalidArg {
                op: "distance",
                msg: format!("unknown distance `{other}`"),
            }),
        }
    }
}

pub fn distance(kind: DistanceKind, a: &[f64], b: &[f64]) -> f64 {
    match kind {
        DistanceKind::SqEuclidean => a.iter().zip(b).map(|(&x, &y)| (x - y) * (x - y)).sum(),
        DistanceKind::Cosine => {
            let dot: f64 = a.iter().zip(b).map(|(&x, &y)| x * y).sum();
            let na: f64 = a.iter().map(|&x| x * x).sum::<f64>().sqrt();
            let nb: f64 = b.iter().map(|&y| y * y).sum::<f64>().sqrt();
            if na == 0.0 || nb == 0.0 {
                1.0
            } else {
                1.0 - dot / (na * nb)
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum SubsetKind {
    All,
    Seen,
    Unseen,
}

impl std::fmt::Display for SubsetKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            SubsetKind::All => "all",
            SubsetKind::Seen => "seen",
            SubsetKind::Unseen => "unseen",
        })
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct RetrievalRow {
    pub op: EvalOp,
    pub subset: SubsetKind,
    /// Queries contributing to the means; restricted-empty targets are
    /// skipped for the seen/unseen subsets.
    pub evaluated: usize,
    pub skipped: usize,
    /// Mean max-IoU aligned with the report's k list.
    pub miou: Vec<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct RetrievalReport {
    pub ks: Vec<usize>,
    pub n_pairs: usize,
    pub pool_size: usize,
    pub distance: DistanceKind,
    pub rows: Vec<RetrievalRow>,
}

impl RetrievalReport {
    pub fn row(&self, op: EvalOp, subset: SubsetKind) -> &RetrievalRow {
        self.rows
            .iter()
            .find(|r| r.op == op && r.subset == subset)
            .expect("all rows present")
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("op,subset,k,evaluated,skipped,miou\n");
        for row in &self.rows {
            for (k, v) in self.ks.iter().zip(&row.miou) {
                out.push_str(&format!(
                    "{},{},{},{},{},{}\n",
                    row.op, row.subset, k, row.evaluated, row.skipped, v
                ));
            }
        }
        out
    }
}

/// For each pair and operator, synthesizes a vector, ranks the test pool by
/// distance (excluding the two source samples, ties by index), and scores
/// the best label-set IoU among the top-k neighbors against the expected
/// post-operation set.
pub fn retrieval_eval(
    route: &OpRoute,
    bank: &FeatureBank,
    ks: &[usize],
    pairing_seed: u64,
    dist: DistanceKind,
) -> Result<RetrievalReport> {
    if ks.is_empty() {
        return Err(Error::InvalidArg {
            op: "retrieval_eval",
            msg: "no k values given".into(),
        });
    }
    let (d, l) = (bank.d, bank.l);
    let pool = bank.split_indices(SplitTag::Test);
    let available = pool.len().saturating_sub(2);
    let max_k = *ks.iter().max().expect("nonempty");
    for &k in ks {
        if k == 0 || k > available {
            return Err(Error::KTooLarge { k, pool: available });
        }
    }
    let (pairs, _) = perfect_matching(&pool, pairing_seed);
    if pairs.is_empty() {
        return Err(Error::EmptyPool {
            what: "test split pairs",
        });
    }
    let n = pairs.len();
    let mut xs = Vec::with_capacity(n * d);
    let mut ys = Vec::with_capacity(n * d);
    for &(i, j) in &pairs {
        xs.extend_from_slice(bank.feature(i));
        ys.extend_from_slice(bank.feature(j));
    }
    let seen = bank.seen_mask();
    let unseen: Vec<bool> = seen.iter().map(|&b| !b).collect();
    let all = vec![true; l];

    let mut rows = Vec::new();
    for kind in [OpKind::Intersection, OpKind::Union, OpKind::Subtraction] {
        let zs = route.apply_rows(kind, &xs, &ys, n, d)?;
        // (evaluated, skipped, per-k sums) per subset.
        let mut acc: Vec<(usize, usize, Vec<f64>)> =
            (0..3).map(|_| (0, 0, vec![0.0; ks.len()])).collect();
        for (r, &(i, j)) in pairs.iter().enumerate() {
            let z = &zs[r * d..(r + 1) * d];
            let mut ranked: Vec<(f64, usize)> = pool
                .iter()
                .filter(|&&p| p != i && p != j)
                .map(|&p| (distance(dist, z, bank.feature(p)), p))
                .collect();
            ranked.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            ranked.truncate(max_k);

            let (a, b) = (bank.label_vec(i), bank.label_vec(j));
            let expected = match kind {
                OpKind::Intersection => labels::set_intersection(&a, &b)?,
                OpKind::Union => labels::set_union(&a, &b)?,
                OpKind::Subtraction => labels::set_subtraction(&a, &b)?,
            };
            for (s, (subset_kind, mask)) in [
                (SubsetKind::All, &all[..]),
                (SubsetKind::Seen, seen),
                (SubsetKind::Unseen, &unseen[..]),
            ]
            .into_iter()
            .enumerate()
            {
                let target = expected.restrict(mask);
                if target.is_empty_set() && subset_kind != SubsetKind::All {
                    acc[s].1 += 1;
                    continue;
                }
                acc[s].0 += 1;
                // ks need not be sorted; recompute the max per prefix.
                for (ki, &k) in ks.iter().enumerate() {
                    let mut best = 0.0f64;
                    for &(_, p) in &ranked[..k] {
                        let neighbor = bank.label_vec(p).restrict(mask);
                        best = best.max(labels::iou(&target, &neighbor)?);
                    }
                    acc[s].2[ki] += best;
                }
            }
        }
        for (s, subset) in [SubsetKind::All, SubsetKind::Seen, SubsetKind::Unseen]
            .into_iter()
            .enumerate()
        {
            let (evaluated, skipped, sums) = &acc[s];
            rows.push(RetrievalRow {
                op: kind.into(),
                subset,
                evaluated: *evaluated,
                skipped: *skipped,
                miou: sums
                    .iter()
                    .map(|v| {
                        if *evaluated > 0 {
                            v / *evaluated as f64
                        } else {
                            0.0
                        }
                    })
                    .collect(),
            });
        }
    }
    Ok(RetrievalReport {
        ks: ks.to_vec(),
        n_pairs: n,
        pool_size: pool.len(),
        distance: dist,
        rows,
    })
}
