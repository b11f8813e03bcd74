//! Synthetic multi-label feature banks with verifiable set-operation ground
//! truth, plus `LBNK` persistence and a CSV importer for externally computed
//! features.
//!
//! Each label has a nonnegative prototype vector; a sample is the amplitude-
//! weighted sum of its labels' prototypes plus clipped Gaussian noise. With
//! disjoint prototype blocks, unit amplitudes and zero noise ("clean mode"),
//! per-block sums decode label sets exactly, which is what the oracle tests
//! lean on.

use std::path::Path;

use rand::rngs::StdRng;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::labels::LabelVec;
use crate::{Error, Result};

pub const BANK_MAGIC: &[u8; 4] = b"LBNK";
pub const BANK_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PrototypeMode {
    DisjointBlocks,
    RandomNonneg,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitTag {
    /// Operator-training pool; carries no unseen labels in filtered banks.
    Train,
    /// Evaluation pool: pairing, retrieval and few-shot queries.
    Test,
    /// Reserved unseen-label pool, disjoint from operator training. Feeds
    /// the unseen-label evaluation classifier and few-shot support sets.
    Aux,
}

impl SplitTag {
    fn to_byte(self) -> u8 {
        match self {
            SplitTag::Train => 0,
            SplitTag::Test => 1,
            SplitTag::Aux => 2,
        }
    }

    fn from_byte(b: u8) -> Result<Self> {
        match b {
            0 => Ok(SplitTag::Train),
            1 => Ok(SplitTag::Test),
            2 => Ok(SplitTag::Aux),
            other => Err(Error::Malformed {
                msg: format!("unknown split tag {other}"),
            }),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct GeneratorSpec {
    pub d: usize,
    pub l: usize,
    pub seen_count: usize,
    pub prototype_mode: PrototypeMode,
    pub amplitude_range: (f64, f64),
    pub noise_sigma: f64,
    /// Inclusive range of labels per sample; a lower bound of 0 explicitly
    /// allows empty label sets.
    pub labels_per_sample: (usize, usize),
    /// Unit amplitudes, zero noise.
    pub clean_mode: bool,
    /// Train-split samples draw labels from the seen set only.
    pub filtered: bool,
    pub train_fraction: f64,
    pub aux_fraction: f64,
}

impl Default for GeneratorSpec {
    fn default() -> Self {
        GeneratorSpec {
            d: 64,
            l: 20,
            seen_count: 16,
            prototype_mode: PrototypeMode::RandomNonneg,
            amplitude_range: (0.8, 1.2),
            noise_sigma: 0.05,
            labels_per_sample: (1, 4),
            clean_mode: false,
            filtered: true,
            train_fraction: 0.5,
            aux_fraction: 0.125,
        }
    }
}

impl GeneratorSpec {
    /// Disjoint blocks, unit amplitudes, zero noise: the oracle setting.
    pub fn clean_disjoint(d: usize, l: usize, seen_count: usize) -> Self {
        GeneratorSpec {
            d,
            l,
            seen_count,
            prototype_mode: PrototypeMode::DisjointBlocks,
            clean_mode: true,
            ..GeneratorSpec::default()
        }
    }

    /// The subset of checks that apply whether rows are generated or
    /// imported: dimensions, seen split, and split fractions.
    pub fn validate_dims(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::InvalidConfig { msg });
        if self.d == 0 || self.l == 0 {
            return fail(format!("d={} and l={} must be positive", self.d, self.l));
        }
        if self.seen_count >= self.l {
            return fail(format!(
                "seen_count {} must be < l {}",
                self.seen_count, self.l
            ));
        }
        if !(0.0..=1.0).contains(&self.train_fraction)
            || !(0.0..=1.0).contains(&self.aux_fraction)
            || self.train_fraction + self.aux_fraction > 1.0
        {
            return fail(format!(
                "bad split fractions train={} aux={}",
                self.train_fraction, self.aux_fraction
            ));
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.validate_dims()?;
        let fail = |msg: String| Err(Error::InvalidConfig { msg });
        if self.prototype_mode == PrototypeMode::DisjointBlocks && self.d < self.l {
            return fail(format!(
                "disjoint blocks need d >= l, got {}x{}",
                self.d, self.l
            ));
        }
        if self.labels_per_sample.0 > self.labels_per_sample.1 {
            return fail(format!(
                "labels_per_sample range {:?} is inverted",
                self.labels_per_sample
            ));
        }
        if self.labels_per_sample.1 > self.l {
            return fail(format!(
                "labels_per_sample upper bound {} exceeds l {}",
                self.labels_per_sample.1, self.l
            ));
        }
        if self.amplitude_range.0 > self.amplitude_range.1 || self.amplitude_range.0 < 0.0 {
            return fail(format!("bad amplitude range {:?}", self.amplitude_range));
        }
        if self.noise_sigma < 0.0 {
            return fail(format!("negative noise sigma {}", self.noise_sigma));
        }
        Ok(())
    }

    pub fn block_layout(&self) -> Result<BlockLayout> {
        match self.prototype_mode {
            PrototypeMode::DisjointBlocks => Ok(BlockLayout::new(self.d, self.l)),
            PrototypeMode::RandomNonneg => Err(Error::InvalidArg {
                op: "oracle_decode",
                msg: "random prototypes have no block decoder".into(),
            }),
        }
    }
}

/// Contiguous partition of the d coordinates into l blocks; the first d mod l
/// blocks are one coordinate longer.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BlockLayout {
    pub d: usize,
    starts: Vec<usize>,
}

impl BlockLayout {
    pub fn new(d: usize, l: usize) -> Self {
        assert!(d >= l && l > 0, "block layout needs d >= l > 0");
        let base = d / l;
        let extra = d % l;
        let mut starts = Vec::with_capacity(l + 1);
        let mut at = 0;
        for k in 0..l {
            starts.push(at);
            at += base + usize::from(k < extra);
        }
        starts.push(d);
        BlockLayout { d, starts }
    }

    pub fn labels(&self) -> usize {
        self.starts.len() - 1
    }

    pub fn block(&self, k: usize) -> std::ops::Range<usize> {
        self.starts[k]..self.starts[k + 1]
    }

    pub fn block_sum(&self, f: &[f64], k: usize) -> f64 {
        f[self.block(k)].iter().sum()
    }
}

/// Label k is on iff the sum of `f` over block k exceeds `threshold`.
pub fn oracle_decode(layout: &BlockLayout, f: &[f64], threshold: f64) -> Result<LabelVec> {
    if f.len() != layout.d {
        return Err(Error::LengthMismatch {
            op: "oracle_decode",
            lhs: f.len(),
            rhs: layout.d,
        });
    }
    Ok(LabelVec::from_bits(
        (0..layout.labels())
            .map(|k| layout.block_sum(f, k) > threshold)
            .collect(),
    ))
}

#[derive(Debug, Clone)]
pub struct FeatureBank {
    pub d: usize,
    pub l: usize,
    features: Vec<f64>,
    labels: Vec<u8>,
    splits: Vec<SplitTag>,
    seen: Vec<bool>,
    pub generator_seed: Option<u64>,
}

/// Equality ignores `generator_seed`: it is provenance metadata and is not
/// part of the on-disk format.
impl PartialEq for FeatureBank {
    fn eq(&self, other: &Self) -> bool {
        self.d == other.d
            && self.l == other.l
            && self.features == other.features
            && self.labels == other.labels
            && self.splits == other.splits
            && self.seen == other.seen
    }
}

impl FeatureBank {
    pub fn from_parts(
        d: usize,
        l: usize,
        features: Vec<f64>,
        labels: Vec<u8>,
        splits: Vec<SplitTag>,
        seen: Vec<bool>,
    ) -> Result<Self> {
        let n = splits.len();
        if features.len() != n * d || labels.len() != n * l || seen.len() != l {
            return Err(Error::InvalidArg {
                op: "feature_bank",
                msg: format!(
                    "inconsistent sizes: n={n} d={d} l={l}, features={}, labels={}, seen={}",
                    features.len(),
                    labels.len(),
                    seen.len()
                ),
            });
        }
        if features.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::InvalidArg {
                op: "feature_bank",
                msg: "features must be finite and nonnegative".into(),
            });
        }
        if labels.iter().any(|&b| b > 1) {
            return Err(Error::InvalidArg {
                op: "feature_bank",
                msg: "labels must be 0/1".into(),
            });
        }
        Ok(FeatureBank {
            d,
            l,
            features,
            labels,
            splits,
            seen,
            generator_seed: None,
        })
    }

    pub fn n(&self) -> usize {
        self.splits.len()
    }

    pub fn feature(&self, i: usize) -> &[f64] {
        &self.features[i * self.d..(i + 1) * self.d]
    }

    pub fn label_row(&self, i: usize) -> &[u8] {
        &self.labels[i * self.l..(i + 1) * self.l]
    }

    pub fn label_vec(&self, i: usize) -> LabelVec {
        LabelVec::from_bytes(self.label_row(i))
    }

    pub fn split(&self, i: usize) -> SplitTag {
        self.splits[i]
    }

    pub fn split_indices(&self, tag: SplitTag) -> Vec<usize> {
        (0..self.n()).filter(|&i| self.splits[i] == tag).collect()
    }

    pub fn seen_mask(&self) -> &[bool] {
        &self.seen
    }

    pub fn seen_indices(&self) -> Vec<usize> {
        (0..self.l).filter(|&k| self.seen[k]).collect()
    }

    pub fn unseen_indices(&self) -> Vec<usize> {
        (0..self.l).filter(|&k| !self.seen[k]).collect()
    }
}

/// Uniformly random mask with exactly `seen_count` ones.
pub fn split_seen_unseen(l: usize, seen_count: usize, seed: u64) -> Result<Vec<bool>> {
    if seen_count >= l {
        return Err(Error::InvalidConfig {
            msg: format!("seen_count {seen_count} must be < l {l}"),
        });
    }
    let mut rng = StdRng::seed_from_u64(seed);
    Ok(draw_seen_mask(l, seen_count, &mut rng))
}

fn draw_seen_mask(l: usize, seen_count: usize, rng: &mut StdRng) -> Vec<bool> {
    let mut idx: Vec<usize> = (0..l).collect();
    idx.shuffle(rng);
    let mut mask = vec![false; l];
    for &k in &idx[..seen_count] {
        mask[k] = true;
    }
    mask
}

fn draw_prototypes(spec: &GeneratorSpec, rng: &mut StdRng) -> Vec<f64> {
    match spec.prototype_mode {
        PrototypeMode::DisjointBlocks => {
            let layout = BlockLayout::new(spec.d, spec.l);
            let mut protos = vec![0.0; spec.l * spec.d];
            for k in 0..spec.l {
                for j in layout.block(k) {
                    protos[k * spec.d + j] = 1.0;
                }
            }
            protos
        }
        PrototypeMode::RandomNonneg => {
            // Sparse random supports: each label owns ~d/8 coordinates with
            // mass bounded away from zero. Pairwise supports barely collide,
            // so per-label signatures stay separable, while the label set as
            // a whole still covers most coordinates.
            let support = (spec.d / 8).max(2).min(spec.d);
            let mut protos = vec![0.0; spec.l * spec.d];
            for k in 0..spec.l {
                let coords = rand::seq::index::sample(rng, spec.d, support);
                for j in coords.iter() {
                    protos[k * spec.d + j] = rng.random_range(0.5..=1.0);
                }
            }
            protos
        }
    }
}

/// Features pass through f32 so in-memory banks match their on-disk form.
fn quantize(x: f64) -> f64 {
    x as f32 as f64
}

pub fn generate_bank(spec: &GeneratorSpec, n: usize, seed: u64) -> Result<FeatureBank> {
    spec.validate()?;
    let mut rng = StdRng::seed_from_u64(seed);
    let seen = draw_seen_mask(spec.l, spec.seen_count, &mut rng);
    let protos = draw_prototypes(spec, &mut rng);

    let n_train = (n as f64 * spec.train_fraction).round() as usize;
    let n_aux = (n as f64 * spec.aux_fraction).round() as usize;
    let n_test = n.saturating_sub(n_train + n_aux);
    let mut splits = Vec::with_capacity(n);
    splits.extend(std::iter::repeat(SplitTag::Train).take(n_train));
    splits.extend(std::iter::repeat(SplitTag::Test).take(n_test));
    splits.extend(std::iter::repeat(SplitTag::Aux).take(n.saturating_sub(n_train + n_test)));

    let seen_pool: Vec<usize> = (0..spec.l).filter(|&k| seen[k]).collect();
    let all_pool: Vec<usize> = (0..spec.l).collect();
    let noise = if spec.clean_mode || spec.noise_sigma == 0.0 {
        None
    } else {
        Some(Normal::new(0.0, spec.noise_sigma).expect("validated sigma"))
    };

    let (lo, hi) = spec.labels_per_sample;
    let mut features = vec![0.0; n * spec.d];
    let mut labels = vec![0u8; n * spec.l];
    for i in 0..n {
        let pool = if spec.filtered && splits[i] == SplitTag::Train {
            &seen_pool
        } else {
            &all_pool
        };
        let count = rng.random_range(lo..=hi).min(pool.len());
        let picked = rand::seq::index::sample(&mut rng, pool.len(), count);
        let row = &mut features[i * spec.d..(i + 1) * spec.d];
        for p in picked.iter() {
            let k = pool[p];
            labels[i * spec.l + k] = 1;
            let amp = if spec.clean_mode {
                1.0
            } else {
                rng.random_range(spec.amplitude_range.0..=spec.amplitude_range.1)
            };
            for j in 0..spec.d {
                row[j] += amp * protos[k * spec.d + j];
            }
        }
        if let Some(dist) = &noise {
            for v in row.iter_mut() {
                *v += dist.sample(&mut rng);
            }
        }
        for v in row.iter_mut() {
            *v = quantize(v.max(0.0));
        }
    }

    Ok(FeatureBank {
        d: spec.d,
        l: spec.l,
        features,
        labels,
        splits,
        seen,
        generator_seed: Some(seed),
    })
}

/// Clean disjoint-block bank realizing exactly the given label sets, in
/// order. Useful for constructing retrieval pools with known contents.
pub fn bank_from_label_sets(
    spec: &GeneratorSpec,
    sets: &[LabelVec],
    splits: Vec<SplitTag>,
    seen: Vec<bool>,
) -> Result<FeatureBank> {
    spec.validate()?;
    if !(spec.clean_mode && spec.prototype_mode == PrototypeMode::DisjointBlocks) {
        return Err(Error::InvalidArg {
            op: "bank_from_label_sets",
            msg: "requires clean disjoint-block mode".into(),
        });
    }
    if sets.len() != splits.len() {
        return Err(Error::LengthMismatch {
            op: "bank_from_label_sets",
            lhs: sets.len(),
            rhs: splits.len(),
        });
    }
    let layout = BlockLayout::new(spec.d, spec.l);
    let mut features = vec![0.0; sets.len() * spec.d];
    let mut labels = vec![0u8; sets.len() * spec.l];
    for (i, s) in sets.iter().enumerate() {
        if s.len() != spec.l {
            return Err(Error::LengthMismatch {
                op: "bank_from_label_sets",
                lhs: s.len(),
                rhs: spec.l,
            });
        }
        for k in s.indices() {
            labels[i * spec.l + k] = 1;
            for j in layout.block(k) {
                features[i * spec.d + j] = 1.0;
            }
        }
    }
    FeatureBank::from_parts(spec.d, spec.l, features, labels, splits, seen)
}

/// Wraps externally computed rows (for example parsed from CSV) in a bank.
/// The seen set and split tags are drawn from `seed`; tags are dealt to a
/// shuffled order so a label-sorted input file cannot skew the splits.
/// Features are snapped to 32-bit like generated ones, keeping the
/// in-memory bank identical to its serialized round trip.
pub fn import_bank(
    spec: &GeneratorSpec,
    features: Vec<f64>,
    labels: Vec<u8>,
    seed: u64,
) -> Result<FeatureBank> {
    spec.validate_dims()?;
    if features.len() % spec.d != 0 {
        return Err(Error::LengthMismatch {
            op: "import_bank",
            lhs: features.len(),
            rhs: spec.d,
        });
    }
    let n = features.len() / spec.d;
    let mut rng = StdRng::seed_from_u64(seed);
    let seen = draw_seen_mask(spec.l, spec.seen_count, &mut rng);

    let n_train = (n as f64 * spec.train_fraction).round() as usize;
    let n_aux = (n as f64 * spec.aux_fraction).round() as usize;
    let n_test = n.saturating_sub(n_train + n_aux);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    let mut splits = vec![SplitTag::Train; n];
    for (rank, &i) in order.iter().enumerate() {
        splits[i] = if rank < n_train {
            SplitTag::Train
        } else if rank < n_train + n_test {
            SplitTag::Test
        } else {
            SplitTag::Aux
        };
    }

    let features = features.into_iter().map(quantize).collect();
    FeatureBank::from_parts(spec.d, spec.l, features, labels, splits, seen)
}

pub(crate) struct Reader<'a> {
    buf: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    pub(crate) fn new(buf: &'a [u8]) -> Self {
        Reader { buf, at: 0 }
    }

    pub(crate) fn take(&mut self, len: usize, what: &str) -> Result<&'a [u8]> {
        if self.at + len > self.buf.len() {
            return Err(Error::Truncated { what: what.into() });
        }
        let s = &self.buf[self.at..self.at + len];
        self.at += len;
        Ok(s)
    }

    pub(crate) fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    pub(crate) fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    pub(crate) fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    pub(crate) fn remaining(&self) -> usize {
        self.buf.len() - self.at
    }

    pub(crate) fn done(&self) -> bool {
        self.at == self.buf.len()
    }
}

pub fn bank_to_bytes(bank: &FeatureBank) -> Vec<u8> {
    let n = bank.n();
    let mut out = Vec::with_capacity(4 + 4 + 24 + bank.l + n + 4 * n * bank.d + n * bank.l);
    out.extend_from_slice(BANK_MAGIC);
    out.extend_from_slice(&BANK_VERSION.to_le_bytes());
    out.extend_from_slice(&(n as u64).to_le_bytes());
    out.extend_from_slice(&(bank.d as u64).to_le_bytes());
    out.extend_from_slice(&(bank.l as u64).to_le_bytes());
    out.extend(bank.seen.iter().map(|&b| b as u8));
    out.extend(bank.splits.iter().map(|t| t.to_byte()));
    for v in &bank.features {
        out.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    out.extend_from_slice(&bank.labels);
    out
}

pub fn bank_from_bytes(buf: &[u8]) -> Result<FeatureBank> {
    let mut r = Reader::new(buf);
    if r.take(4, "magic")? != BANK_MAGIC {
        return Err(Error::BadMagic { expected: "LBNK" });
    }
    let version = r.u32("version")?;
    if version != BANK_VERSION {
        return Err(Error::UnsupportedVersion {
            found: version,
            supported: BANK_VERSION,
        });
    }
    let n = r.u64("sample count")? as usize;
    let d = r.u64("feature dim")? as usize;
    let l = r.u64("label count")? as usize;
    let seen = r
        .take(l, "seen mask")?
        .iter()
        .map(|&b| b != 0)
        .collect::<Vec<_>>();
    let splits = r
        .take(n, "split tags")?
        .iter()
        .map(|&b| SplitTag::from_byte(b))
        .collect::<Result<Vec<_>>>()?;
    let raw = r.take(4 * n * d, "features")?;
    let mut features = Vec::with_capacity(n * d);
    for c in raw.chunks_exact(4) {
        features.push(f32::from_le_bytes(c.try_into().unwrap()) as f64);
    }
    let labels = r.take(n * l, "labels")?.to_vec();
    if !r.done() {
        return Err(Error::Malformed {
            msg: format!("{} trailing bytes", r.remaining()),
        });
    }
    FeatureBank::from_parts(d, l, features, labels, splits, seen)
}

pub fn save_bank(bank: &FeatureBank, path: &Path) -> Result<()> {
    std::fs::write(path, bank_to_bytes(bank))?;
    Ok(())
}

pub fn load_bank(path: &Path) -> Result<FeatureBank> {
    bank_from_bytes(&std::fs::read(path)?)
}

/// One CSV row = d floats then l bits, comma-separated.
pub fn parse_feature_csv(text: &str, d: usize, l: usize) -> Result<(Vec<f64>, Vec<u8>)> {
    let mut features = Vec::new();
    let mut labels = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != d + l {
            return Err(Error::Malformed {
                msg: format!(
                    "line {}: expected {} fields ({} features + {} labels), got {}",
                    lineno + 1,
                    d + l,
                    d,
                    l,
                    fields.len()
                ),
            });
        }
        for f in &fields[..d] {
            let v: f64 = f.parse().map_err(|_| Error::Malformed {
                msg: format!("line {}: bad float `{f}`", lineno + 1),
            })?;
            features.push(quantize(v));
        }
        for f in &fields[d..] {
            match *f {
                "0" => labels.push(0),
                "1" => labels.push(1),
                other => {
                    return Err(Error::Malformed {
                        msg: format!("line {}: label bit `{other}` is not 0/1", lineno + 1),
                    })
                }
            }
        }
    }
    Ok((features, labels))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::labels;

    #[test]
    fn clean_single_label_equals_prototype() {
        let spec = GeneratorSpec::clean_disjoint(20, 5, 3);
        let bank = generate_bank(&spec, 50, 9).unwrap();
        let layout = spec.block_layout().unwrap();
        for i in 0..bank.n() {
            let lv = bank.label_vec(i);
            if lv.count() != 1 {
                continue;
            }
            let k = lv.indices()[0];
            let f = bank.feature(i);
            for j in 0..spec.d {
                let want = if layout.block(k).contains(&j) {
                    1.0
                } else {
                    0.0
                };
                assert_eq!(f[j], want);
            }
        }
    }

    #[test]
    fn clean_mode_block_decoding_recovers_all_label_sets() {
        let spec = GeneratorSpec::clean_disjoint(64, 20, 16);
        let bank = generate_bank(&spec, 400, 3).unwrap();
        let layout = spec.block_layout().unwrap();
        for i in 0..bank.n() {
            let decoded = oracle_decode(&layout, bank.feature(i), 0.5).unwrap();
            assert_eq!(decoded, bank.label_vec(i), "sample {i}");
        }
    }

    #[test]
    fn same_seed_same_bank() {
        let spec = GeneratorSpec::default();
        let a = generate_bank(&spec, 128, 77).unwrap();
        let b = generate_bank(&spec, 128, 77).unwrap();
        assert_eq!(a, b);
        let c = generate_bank(&spec, 128, 78).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn filtered_train_split_has_no_unseen_positives() {
        let spec = GeneratorSpec::default();
        let bank = generate_bank(&spec, 640, 5).unwrap();
        let unseen = bank.unseen_indices();
        assert_eq!(unseen.len(), 4);
        for i in bank.split_indices(SplitTag::Train) {
            let row = bank.label_row(i);
            for &k in &unseen {
                assert_eq!(row[k], 0, "train sample {i} carries unseen label {k}");
            }
        }
        // Test and aux splits do carry them.
        let mut found = false;
        for i in bank.split_indices(SplitTag::Aux) {
            let row = bank.label_row(i);
            if unseen.iter().any(|&k| row[k] == 1) {
                found = true;
                break;
            }
        }
        assert!(found, "aux split never saw an unseen label");
    }

    #[test]
    fn features_are_nonnegative_with_noise() {
        let spec = GeneratorSpec {
            noise_sigma: 0.5,
            ..GeneratorSpec::default()
        };
        let bank = generate_bank(&spec, 200, 1).unwrap();
        for i in 0..bank.n() {
            assert!(bank.feature(i).iter().all(|&v| v >= 0.0));
        }
    }

    #[test]
    fn split_fractions_and_mask_counts() {
        let spec = GeneratorSpec::default();
        let bank = generate_bank(&spec, 3200, 42).unwrap();
        assert_eq!(bank.split_indices(SplitTag::Train).len(), 2000);
        assert_eq!(bank.split_indices(SplitTag::Test).len(), 800);
        assert_eq!(bank.split_indices(SplitTag::Aux).len(), 400);
        assert_eq!(bank.seen_indices().len(), 16);

        let mask = split_seen_unseen(20, 16, 7).unwrap();
        assert_eq!(mask.iter().filter(|&&b| b).count(), 16);
        assert_eq!(mask, split_seen_unseen(20, 16, 7).unwrap());
        let edge = split_seen_unseen(20, 19, 7).unwrap();
        assert_eq!(edge.iter().filter(|&&b| !b).count(), 1);
    }

    #[test]
    fn oracle_decode_cases() {
        let layout = BlockLayout::new(10, 5);
        let mut f = vec![0.0; 10];
        for j in layout.block(1) {
            f[j] = 1.0;
        }
        for j in layout.block(3) {
            f[j] = 1.0;
        }
        let decoded = oracle_decode(&layout, &f, 0.5).unwrap();
        assert_eq!(decoded.indices(), vec![1, 3]);
        assert_eq!(
            oracle_decode(&layout, &vec![0.0; 10], 0.5).unwrap().count(),
            0
        );
        let spec = GeneratorSpec {
            prototype_mode: PrototypeMode::RandomNonneg,
            ..GeneratorSpec::default()
        };
        assert!(spec.block_layout().is_err());
    }

    #[test]
    fn clean_pairwise_min_max_reludiff_decode_to_set_ops() {
        let spec = GeneratorSpec::clean_disjoint(64, 20, 16);
        let bank = generate_bank(&spec, 200, 13).unwrap();
        let layout = spec.block_layout().unwrap();
        let mut rng = StdRng::seed_from_u64(99);
        for _ in 0..1000 {
            let i = rng.random_range(0..bank.n());
            let j = rng.random_range(0..bank.n());
            let (fx, fy) = (bank.feature(i), bank.feature(j));
            let (lx, ly) = (bank.label_vec(i), bank.label_vec(j));
            let maxv: Vec<f64> = fx.iter().zip(fy).map(|(&a, &b)| a.max(b)).collect();
            let minv: Vec<f64> = fx.iter().zip(fy).map(|(&a, &b)| a.min(b)).collect();
            let subv: Vec<f64> = fx.iter().zip(fy).map(|(&a, &b)| (a - b).max(0.0)).collect();
            assert_eq!(
                oracle_decode(&layout, &maxv, 0.5).unwrap(),
                labels::set_union(&lx, &ly).unwrap()
            );
            assert_eq!(
                oracle_decode(&layout, &minv, 0.5).unwrap(),
                labels::set_intersection(&lx, &ly).unwrap()
            );
            assert_eq!(
                oracle_decode(&layout, &subv, 0.5).unwrap(),
                labels::set_subtraction(&lx, &ly).unwrap()
            );
        }
    }

    #[test]
    fn bank_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bank.lbnk");
        let bank = generate_bank(&GeneratorSpec::default(), 96, 21).unwrap();
        save_bank(&bank, &path).unwrap();
        let loaded = load_bank(&path).unwrap();
        assert_eq!(loaded, bank);
        let bytes1 = std::fs::read(&path).unwrap();
        save_bank(&loaded, &path).unwrap();
        let bytes2 = std::fs::read(&path).unwrap();
        assert_eq!(bytes1, bytes2);
    }

    #[test]
    fn corrupt_banks_give_typed_errors() {
        let bank = generate_bank(&GeneratorSpec::default(), 16, 2).unwrap();
        let bytes = bank_to_bytes(&bank);

        let mut wrong_magic = bytes.clone();
        wrong_magic[0] = b'X';
        assert!(matches!(
            bank_from_bytes(&wrong_magic),
            Err(Error::BadMagic { .. })
        ));

        let truncated = &bytes[..bytes.len() - 5];
        assert!(matches!(
            bank_from_bytes(truncated),
            Err(Error::Truncated { .. })
        ));

        let mut bad_version = bytes.clone();
        bad_version[4..8].copy_from_slice(&9u32.to_le_bytes());
        assert!(matches!(
            bank_from_bytes(&bad_version),
            Err(Error::UnsupportedVersion { found: 9, .. })
        ));

        let mut trailing = bytes.clone();
        trailing.push(0);
        assert!(matches!(
            bank_from_bytes(&trailing),
            Err(Error::Malformed { .. })
        ));
    }

    #[test]
    fn csv_rows_parse_and_reject_malformed() {
        let (f, l) = parse_feature_csv("0.5,1.25,0,1\n2.0,0.0,1,0\n", 2, 2).unwrap();
        assert_eq!(f, vec![0.5, 1.25, 2.0, 0.0]);
        assert_eq!(l, vec![0, 1, 1, 0]);
        assert!(parse_feature_csv("0.5,1.0,0\n", 2, 2).is_err());
        assert!(parse_feature_csv("0.5,x,0,1\n", 2, 2).is_err());
        assert!(parse_feature_csv("0.5,1.0,0,2\n", 2, 2).is_err());
    }

    #[test]
    fn imported_rows_become_a_valid_bank() {
        let text: String = (0..40)
            .map(|i| format!("{}.5,{},{},{}\n", i, i % 3, i % 2, (i + 1) % 2))
            .collect();
        let (features, labels) = parse_feature_csv(&text, 2, 2).unwrap();
        let spec = GeneratorSpec {
            d: 2,
            l: 2,
            seen_count: 1,
            train_fraction: 0.5,
            aux_fraction: 0.25,
            ..GeneratorSpec::default()
        };
        let bank = import_bank(&spec, features.clone(), labels.clone(), 3).unwrap();
        assert_eq!(bank.n(), 40);
        assert_eq!(bank.split_indices(SplitTag::Train).len(), 20);
        assert_eq!(bank.split_indices(SplitTag::Aux).len(), 10);
        assert_eq!(bank.seen_indices().len(), 1);
        // row order preserved, values snapped to 32-bit
        assert_eq!(bank.feature(1), &[1.5f32 as f64, 1.0]);
        assert_eq!(import_bank(&spec, features.clone(), labels, 3).unwrap(), bank);
        let bytes = bank_to_bytes(&bank);
        assert_eq!(bank_from_bytes(&bytes).unwrap(), bank);
        assert!(import_bank(&spec, features[..3].to_vec(), vec![0; 2], 3).is_err());
    }
}
