//! Operator networks, the shared linear classifier, parameter-free analytic
//! operators, composed set expressions, and `LASO` model checkpoints.
//!
//! Each operator net maps a concatenated pair of d-dim features (2d in) back
//! to feature space (d out) through fully-connected blocks of
//! linear -> batch norm -> leaky ReLU -> dropout; the final block uses a
//! plain ReLU and no dropout so outputs stay in the nonnegative feature cone.

use std::collections::BTreeMap;
use std::rc::Rc;

use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::autodiff::{dropout_mask, RunningStats, Tape, Tensor};
use crate::labels::{self, LabelVec};
use crate::synth::{BlockLayout, FeatureBank, Reader};
use crate::{Error, Result};

pub const MODEL_MAGIC: &[u8; 4] = b"LASO";
pub const MODEL_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OpKind {
    Intersection,
    Union,
    Subtraction,
}

impl std::str::FromStr for OpKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "int" | "intersection" => Ok(OpKind::Intersection),
            "uni" | "union" => Ok(OpKind::Union),
            "sub" | "subtraction" => Ok(OpKind::Subtraction),
            other => Err(Error::InvalidArg {
                op: "op_kind",
                msg: format!("unknown operator `{other}`"),
            }),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Activation {
    Relu,
    LeakyRelu(f64),
}

impl Activation {
    fn apply(self, tape: &mut Tape, x: &Tensor) -> Tensor {
        match self {
            Activation::Relu => tape.relu(x),
            Activation::LeakyRelu(slope) => tape.leaky_relu(x, slope),
        }
    }
}

#[derive(Debug)]
pub struct MlpBlock {
    weight: Tensor,
    bias: Tensor,
    gamma: Tensor,
    beta: Tensor,
    stats: RunningStats,
    activation: Activation,
    dropout: Option<f64>,
}

impl MlpBlock {
    fn new(
        in_dim: usize,
        out_dim: usize,
        activation: Activation,
        dropout: Option<f64>,
        rng: &mut StdRng,
    ) -> Self {
        let bound = (6.0 / in_dim as f64).sqrt();
        let w: Vec<f64> = (0..out_dim * in_dim)
            .map(|_| rng.random_range(-bound..=bound))
            .collect();
        MlpBlock {
            weight: Tensor::param(&[out_dim, in_dim], w).expect("sized above"),
            bias: Tensor::param(&[out_dim], vec![0.0; out_dim]).expect("sized above"),
            gamma: Tensor::param(&[out_dim], vec![1.0; out_dim]).expect("sized above"),
            beta: Tensor::param(&[out_dim], vec![0.0; out_dim]).expect("sized above"),
            stats: RunningStats::new(out_dim),
            activation,
            dropout,
        }
    }

    fn out_dim(&self) -> usize {
        self.weight.shape()[0]
    }

    fn forward_train(
        &mut self,
        tape: &mut Tape,
        x: &Tensor,
        mask: Option<&Rc<Vec<f64>>>,
        update_stats: bool,
    ) -> Result<Tensor> {
        let h = tape.matmul_tb(x, &self.weight)?;
        let h = tape.add_bias(&h, &self.bias)?;
        let h = tape.batch_norm_train(&h, &self.gamma, &self.beta, &mut self.stats, update_stats)?;
        let h = self.activation.apply(tape, &h);
        match (self.dropout, mask) {
            (Some(_), Some(m)) => tape.dropout_masked(&h, m),
            (None, None) => Ok(h),
            (Some(_), None) => Err(Error::InvalidArg {
                op: "forward_train",
                msg: "dropout block needs a mask".into(),
            }),
            (None, Some(_)) => Err(Error::InvalidArg {
                op: "forward_train",
                msg: "mask given to a block without dropout".into(),
            }),
        }
    }

    fn forward_eval(&self, tape: &mut Tape, x: &Tensor) -> Result<Tensor> {
        let h = tape.matmul_tb(x, &self.weight)?;
        let h = tape.add_bias(&h, &self.bias)?;
        let h = tape.batch_norm_eval(&h, &self.gamma, &self.beta, &self.stats)?;
        Ok(self.activation.apply(tape, &h))
    }
}

/// Per-block (out, in) dims: hidden blocks keep width 2d, the tail contracts
/// to d and refines once at width d.
fn block_dims(d: usize, depth: usize) -> Result<Vec<(usize, usize)>> {
    match depth {
        3 => Ok(vec![(2 * d, 2 * d), (d, 2 * d), (d, d)]),
        4 => Ok(vec![(2 * d, 2 * d), (2 * d, 2 * d), (d, 2 * d), (d, d)]),
        other => Err(Error::InvalidConfig {
            msg: format!("operator depth must be 3 or 4, got {other}"),
        }),
    }
}

#[derive(Debug)]
pub struct LasoOperatorNet {
    blocks: Vec<MlpBlock>,
}

impl LasoOperatorNet {
    pub fn new(
        d: usize,
        depth: usize,
        dropout: f64,
        leaky_slope: f64,
        rng: &mut StdRng,
    ) -> Result<Self> {
        let dims = block_dims(d, depth)?;
        let last = dims.len() - 1;
        let blocks = dims
            .iter()
            .enumerate()
            .map(|(i, &(out, inp))| {
                let act = if i == last {
                    Activation::Relu
                } else {
                    Activation::LeakyRelu(leaky_slope)
                };
                let drop = (i != last && dropout > 0.0).then_some(dropout);
                MlpBlock::new(inp, out, act, drop, rng)
            })
            .collect();
        Ok(LasoOperatorNet { blocks })
    }

    pub fn depth(&self) -> usize {
        self.blocks.len()
    }

    /// One fresh dropout realization per block, sized for `batch` rows.
    /// Several forwards within one optimization step share these.
    pub fn draw_masks(&self, batch: usize, rng: &mut StdRng) -> Vec<Option<Rc<Vec<f64>>>> {
        self.blocks
            .iter()
            .map(|b| {
                b.dropout
                    .map(|rate| dropout_mask(batch * b.out_dim(), rate, rng))
            })
            .collect()
    }

    /// Train-mode forward with shared dropout masks. Running statistics
    /// absorb this batch only when `update_stats` is set; auxiliary passes
    /// (swapped orders, reconstruction) run with it off so eval-time
    /// normalization tracks the canonical input distribution.
    pub fn forward_train(
        &mut self,
        tape: &mut Tape,
        x: &Tensor,
        y: &Tensor,
        masks: &[Option<Rc<Vec<f64>>>],
        update_stats: bool,
    ) -> Result<Tensor> {
        if masks.len() != self.blocks.len() {
            return Err(Error::LengthMismatch {
                op: "forward_train",
                lhs: masks.len(),
                rhs: self.blocks.len(),
            });
        }
        let mut h = tape.concat_lastdim(x, y)?;
        for (b, m) in self.blocks.iter_mut().zip(masks) {
            h = b.forward_train(tape, &h, m.as_ref(), update_stats)?;
        }
        Ok(h)
    }

    pub fn forward_eval(&self, tape: &mut Tape, x: &Tensor, y: &Tensor) -> Result<Tensor> {
        let mut h = tape.concat_lastdim(x, y)?;
        for b in &self.blocks {
            h = b.forward_eval(tape, &h)?;
        }
        Ok(h)
    }

    fn named_params(&self, prefix: &str) -> Vec<(String, Tensor)> {
        let mut out = Vec::with_capacity(4 * self.blocks.len());
        for (i, b) in self.blocks.iter().enumerate() {
            out.push((format!("{prefix}.blocks.{i}.weight"), b.weight.clone()));
            out.push((format!("{prefix}.blocks.{i}.bias"), b.bias.clone()));
            out.push((format!("{prefix}.blocks.{i}.gamma"), b.gamma.clone()));
            out.push((format!("{prefix}.blocks.{i}.beta"), b.beta.clone()));
        }
        out
    }
}

#[derive(Debug)]
pub struct LinearClassifier {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl LinearClassifier {
    pub fn new(d: usize, l: usize, rng: &mut StdRng) -> Self {
        let bound = (6.0 / d as f64).sqrt();
        let w: Vec<f64> = (0..l * d)
            .map(|_| rng.random_range(-bound..=bound))
            .collect();
        LinearClassifier {
            weight: Tensor::param(&[l, d], w).expect("sized above"),
            bias: Tensor::param(&[l], vec![0.0; l]).expect("sized above"),
        }
    }

    pub fn from_values(d: usize, l: usize, weight: Vec<f64>, bias: Vec<f64>) -> Result<Self> {
        Ok(LinearClassifier {
            weight: Tensor::param(&[l, d], weight)?,
            bias: Tensor::param(&[l], bias)?,
        })
    }

    /// Exact classifier for clean disjoint-block features: score_k is the
    /// block-k coordinate sum minus 0.5, positive iff label k is present.
    pub fn block_oracle(layout: &BlockLayout) -> Self {
        let (d, l) = (layout.d, layout.labels());
        let mut w = vec![0.0; l * d];
        for k in 0..l {
            for j in layout.block(k) {
                w[k * d + j] = 1.0;
            }
        }
        LinearClassifier {
            weight: Tensor::new(&[l, d], w).expect("sized above"),
            bias: Tensor::new(&[l], vec![-0.5; l]).expect("sized above"),
        }
    }

    pub fn dims(&self) -> (usize, usize) {
        let s = self.weight.shape();
        (s[1], s[0])
    }

    pub fn scores(&self, tape: &mut Tape, x: &Tensor) -> Result<Tensor> {
        let h = tape.matmul_tb(x, &self.weight)?;
        tape.add_bias(&h, &self.bias)
    }

    /// Scores through value copies of the parameters: gradients flow into
    /// `x` but can never reach the classifier itself.
    pub fn scores_frozen(&self, tape: &mut Tape, x: &Tensor) -> Result<Tensor> {
        let w = Tensor::new(&self.weight.shape(), self.weight.to_vec())?;
        let b = Tensor::new(&self.bias.shape(), self.bias.to_vec())?;
        let h = tape.matmul_tb(x, &w)?;
        tape.add_bias(&h, &b)
    }
}

/// Elementwise, parameter-free operator baselines.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnalyticVariant {
    /// union = x + y, intersection = x * y, subtraction = x - y.
    Arithmetic,
    /// union = max, intersection = min, subtraction = relu(x - y).
    /// The stronger baseline; preserves the clean block encoding exactly.
    MinMax,
}

impl std::str::FromStr for AnalyticVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "arithmetic" => Ok(AnalyticVariant::Arithmetic),
            "min_max" | "minmax" => Ok(AnalyticVariant::MinMax),
            other => Err(Error::InvalidArg {
                op: "analytic_variant",
                msg: format!("unknown variant `{other}`"),
            }),
        }
    }
}

pub fn analytic_op(
    kind: OpKind,
    variant: AnalyticVariant,
    fx: &[f64],
    fy: &[f64],
) -> Result<Vec<f64>> {
    if fx.len() != fy.len() {
        return Err(Error::LengthMismatch {
            op: "analytic_op",
            lhs: fx.len(),
            rhs: fy.len(),
        });
    }
    let f: fn(f64, f64) -> f64 = match (variant, kind) {
        (AnalyticVariant::Arithmetic, OpKind::Union) => |a, b| a + b,
        (AnalyticVariant::Arithmetic, OpKind::Intersection) => |a, b| a * b,
        (AnalyticVariant::Arithmetic, OpKind::Subtraction) => |a, b| a - b,
        (AnalyticVariant::MinMax, OpKind::Union) => f64::max,
        (AnalyticVariant::MinMax, OpKind::Intersection) => f64::min,
        (AnalyticVariant::MinMax, OpKind::Subtraction) => |a, b| (a - b).max(0.0),
    };
    Ok(fx.iter().zip(fy).map(|(&a, &b)| f(a, b)).collect())
}

#[derive(Debug)]
pub struct LasoModel {
    pub d: usize,
    pub l: usize,
    pub m_int: LasoOperatorNet,
    pub m_uni: LasoOperatorNet,
    pub m_sub: LasoOperatorNet,
    pub classifier: LinearClassifier,
    pub dropout: f64,
    pub leaky_slope: f64,
}

impl LasoModel {
    pub fn new(
        d: usize,
        l: usize,
        depth: usize,
        dropout: f64,
        leaky_slope: f64,
        seed: u64,
    ) -> Result<Self> {
        if d == 0 || l == 0 {
            return Err(Error::InvalidConfig {
                msg: format!("model dims d={d} l={l} must be positive"),
            });
        }
        if !(0.0..1.0).contains(&dropout) {
            return Err(Error::InvalidConfig {
                msg: format!("dropout {dropout} outside [0, 1)"),
            });
        }
        let mut rng = StdRng::seed_from_u64(seed);
        Ok(LasoModel {
            d,
            l,
            m_int: LasoOperatorNet::new(d, depth, dropout, leaky_slope, &mut rng)?,
            m_uni: LasoOperatorNet::new(d, depth, dropout, leaky_slope, &mut rng)?,
            m_sub: LasoOperatorNet::new(d, depth, dropout, leaky_slope, &mut rng)?,
            classifier: LinearClassifier::new(d, l, &mut rng),
            dropout,
            leaky_slope,
        })
    }

    pub fn operator_net(&self, kind: OpKind) -> &LasoOperatorNet {
        match kind {
            OpKind::Intersection => &self.m_int,
            OpKind::Union => &self.m_uni,
            OpKind::Subtraction => &self.m_sub,
        }
    }

    pub fn operator_net_mut(&mut self, kind: OpKind) -> &mut LasoOperatorNet {
        match kind {
            OpKind::Intersection => &mut self.m_int,
            OpKind::Union => &mut self.m_uni,
            OpKind::Subtraction => &mut self.m_sub,
        }
    }

    pub fn operator_params(&self) -> Vec<(String, Tensor)> {
        let mut out = self.m_int.named_params("m_int");
        out.extend(self.m_uni.named_params("m_uni"));
        out.extend(self.m_sub.named_params("m_sub"));
        out
    }

    pub fn classifier_params(&self) -> Vec<(String, Tensor)> {
        vec![
            ("classifier.weight".into(), self.classifier.weight.clone()),
            ("classifier.bias".into(), self.classifier.bias.clone()),
        ]
    }

    pub fn named_params(&self) -> Vec<(String, Tensor)> {
        let mut out = self.operator_params();
        out.extend(self.classifier_params());
        out
    }

    /// Batched eval-mode operator application on row-major rows.
    pub fn apply_operator_rows(
        &self,
        kind: OpKind,
        xs: &[f64],
        ys: &[f64],
        rows: usize,
    ) -> Result<Vec<f64>> {
        if xs.len() != rows * self.d || ys.len() != rows * self.d {
            return Err(Error::LengthMismatch {
                op: "apply_operator",
                lhs: xs.len(),
                rhs: rows * self.d,
            });
        }
        let mut tape = Tape::new();
        let x = Tensor::new(&[rows, self.d], xs.to_vec())?;
        let y = Tensor::new(&[rows, self.d], ys.to_vec())?;
        let z = self.operator_net(kind).forward_eval(&mut tape, &x, &y)?;
        Ok(z.to_vec())
    }

    pub fn apply_operator(&self, kind: OpKind, fx: &[f64], fy: &[f64]) -> Result<Vec<f64>> {
        self.apply_operator_rows(kind, fx, fy, 1)
    }

    /// Eval-mode classifier logits for row-major feature rows.
    pub fn classify_rows(&self, xs: &[f64], rows: usize) -> Result<Vec<f64>> {
        if xs.len() != rows * self.d {
            return Err(Error::LengthMismatch {
                op: "classify",
                lhs: xs.len(),
                rhs: rows * self.d,
            });
        }
        let mut tape = Tape::new();
        let x = Tensor::new(&[rows, self.d], xs.to_vec())?;
        Ok(self.classifier.scores(&mut tape, &x)?.to_vec())
    }

    pub fn classifier_checksum(&self) -> u64 {
        checksum_params(&self.classifier_params(), &[])
    }

    pub fn operators_checksum(&self) -> u64 {
        let mut stats = Vec::new();
        for (prefix, net) in [
            ("m_int", &self.m_int),
            ("m_uni", &self.m_uni),
            ("m_sub", &self.m_sub),
        ] {
            for (i, b) in net.blocks.iter().enumerate() {
                stats.push((
                    format!("{prefix}.blocks.{i}.running_mean"),
                    b.stats.mean.clone(),
                ));
                stats.push((
                    format!("{prefix}.blocks.{i}.running_var"),
                    b.stats.var.clone(),
                ));
            }
        }
        checksum_params(&self.operator_params(), &stats)
    }
}

/// FNV-1a over parameter names and exact value bytes; order-sensitive.
fn checksum_params(params: &[(String, Tensor)], extra: &[(String, Vec<f64>)]) -> u64 {
    const OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
    const PRIME: u64 = 0x0000_0100_0000_01b3;
    let mut h = OFFSET;
    let mut eat = |bytes: &[u8]| {
        for &b in bytes {
            h ^= b as u64;
            h = h.wrapping_mul(PRIME);
        }
    };
    for (name, t) in params {
        eat(name.as_bytes());
        for v in t.values().iter() {
            eat(&v.to_le_bytes());
        }
    }
    for (name, vals) in extra {
        eat(name.as_bytes());
        for v in vals {
            eat(&v.to_le_bytes());
        }
    }
    h
}

// --- composed set expressions -----------------------------------------------

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum SetExpr {
    Sample(usize),
    Op(OpKind, Box<SetExpr>, Box<SetExpr>),
}

struct ExprParser<'a> {
    s: &'a [u8],
    at: usize,
}

impl<'a> ExprParser<'a> {
    fn skip_ws(&mut self) {
        while self.at < self.s.len() && self.s[self.at].is_ascii_whitespace() {
            self.at += 1;
        }
    }

    fn eat(&mut self, c: u8) -> Result<()> {
        self.skip_ws();
        if self.at < self.s.len() && self.s[self.at] == c {
            self.at += 1;
            Ok(())
        } else {
            Err(self.fail(&format!("expected `{}`", c as char)))
        }
    }

    fn fail(&self, msg: &str) -> Error {
        Error::ExprParse {
            msg: format!("{msg} at byte {}", self.at),
        }
    }

    fn expr(&mut self) -> Result<SetExpr> {
        self.skip_ws();
        if self.at >= self.s.len() {
            return Err(self.fail("expected operator or sample id"));
        }
        let c = self.s[self.at];
        if c.is_ascii_digit() {
            let start = self.at;
            while self.at < self.s.len() && self.s[self.at].is_ascii_digit() {
                self.at += 1;
            }
            let text = std::str::from_utf8(&self.s[start..self.at]).expect("ascii digits");
            let id = text
                .parse::<usize>()
                .map_err(|_| self.fail("sample id overflows usize"))?;
            return Ok(SetExpr::Sample(id));
        }
        if !c.is_ascii_alphabetic() {
            return Err(self.fail("expected operator or sample id"));
        }
        let start = self.at;
        while self.at < self.s.len() && self.s[self.at].is_ascii_alphabetic() {
            self.at += 1;
        }
        let name = std::str::from_utf8(&self.s[start..self.at]).expect("ascii letters");
        let kind = match name {
            "uni" => OpKind::Union,
            "int" => OpKind::Intersection,
            "sub" => OpKind::Subtraction,
            other => return Err(self.fail(&format!("unknown operator `{other}`"))),
        };
        self.eat(b'(')?;
        let a = self.expr()?;
        self.eat(b',')?;
        let b = self.expr()?;
        self.eat(b')')?;
        Ok(SetExpr::Op(kind, Box::new(a), Box::new(b)))
    }
}

pub fn parse_expr(input: &str) -> Result<SetExpr> {
    let mut p = ExprParser {
        s: input.as_bytes(),
        at: 0,
    };
    let e = p.expr()?;
    p.skip_ws();
    if p.at != p.s.len() {
        return Err(p.fail("trailing input"));
    }
    Ok(e)
}

pub enum OpRoute<'a> {
    Learned(&'a LasoModel),
    Analytic(AnalyticVariant),
}

impl OpRoute<'_> {
    /// Applies one operator to row-major batches of paired features.
    pub fn apply_rows(
        &self,
        kind: OpKind,
        xs: &[f64],
        ys: &[f64],
        rows: usize,
        d: usize,
    ) -> Result<Vec<f64>> {
        match self {
            OpRoute::Learned(model) => {
                if model.d != d {
                    return Err(Error::LengthMismatch {
                        op: "apply_rows",
                        lhs: model.d,
                        rhs: d,
                    });
                }
                model.apply_operator_rows(kind, xs, ys, rows)
            }
            OpRoute::Analytic(variant) => {
                if xs.len() != rows * d || ys.len() != rows * d {
                    return Err(Error::LengthMismatch {
                        op: "apply_rows",
                        lhs: xs.len(),
                        rhs: rows * d,
                    });
                }
                analytic_op(kind, *variant, xs, ys)
            }
        }
    }
}

/// Evaluates an expression over bank samples, carrying the exact label-set
/// algebra alongside the feature-space computation.
pub fn compose_expression(
    expr: &SetExpr,
    bank: &FeatureBank,
    route: &OpRoute,
) -> Result<(Vec<f64>, LabelVec)> {
    if let OpRoute::Learned(model) = route {
        if model.d != bank.d || model.l != bank.l {
            return Err(Error::InvalidArg {
                op: "compose",
                msg: format!(
                    "model is {}x{} but bank is {}x{}",
                    model.d, model.l, bank.d, bank.l
                ),
            });
        }
    }
    match expr {
        SetExpr::Sample(id) => {
            if *id >= bank.n() {
                return Err(Error::SampleOutOfRange {
                    id: *id,
                    len: bank.n(),
                });
            }
            Ok((bank.feature(*id).to_vec(), bank.label_vec(*id)))
        }
        SetExpr::Op(kind, a, b) => {
            let (fa, la) = compose_expression(a, bank, route)?;
            let (fb, lb) = compose_expression(b, bank, route)?;
            let f = match route {
                OpRoute::Learned(model) => model.apply_operator(*kind, &fa, &fb)?,
                OpRoute::Analytic(variant) => analytic_op(*kind, *variant, &fa, &fb)?,
            };
            let lset = match kind {
                OpKind::Intersection => labels::set_intersection(&la, &lb)?,
                OpKind::Union => labels::set_union(&la, &lb)?,
                OpKind::Subtraction => labels::set_subtraction(&la, &lb)?,
            };
            Ok((f, lset))
        }
    }
}

// --- LASO checkpoints --------------------------------------------------------

fn put_tensor(out: &mut Vec<u8>, name: &str, extents: &[usize], values: &[f64]) {
    assert!(name.len() < u16::MAX as usize && extents.len() < u8::MAX as usize);
    out.extend_from_slice(&(name.len() as u16).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.push(extents.len() as u8);
    for &e in extents {
        out.extend_from_slice(&(e as u64).to_le_bytes());
    }
    debug_assert_eq!(extents.iter().product::<usize>(), values.len());
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

fn net_blob(out: &mut Vec<u8>, net: &LasoOperatorNet, dropout: f64, leaky_slope: f64) {
    out.extend_from_slice(&(6 * net.blocks.len() as u32 + 1).to_le_bytes());
    for (i, b) in net.blocks.iter().enumerate() {
        put_tensor(
            out,
            &format!("blocks.{i}.weight"),
            &b.weight.shape(),
            &b.weight.to_vec(),
        );
        put_tensor(
            out,
            &format!("blocks.{i}.bias"),
            &b.bias.shape(),
            &b.bias.to_vec(),
        );
        put_tensor(
            out,
            &format!("blocks.{i}.gamma"),
            &b.gamma.shape(),
            &b.gamma.to_vec(),
        );
        put_tensor(
            out,
            &format!("blocks.{i}.beta"),
            &b.beta.shape(),
            &b.beta.to_vec(),
        );
        put_tensor(
            out,
            &format!("blocks.{i}.running_mean"),
            &[b.stats.mean.len()],
            &b.stats.mean,
        );
        put_tensor(
            out,
            &format!("blocks.{i}.running_var"),
            &[b.stats.var.len()],
            &b.stats.var,
        );
    }
    put_tensor(out, "hyper", &[2], &[dropout, leaky_slope]);
}

pub fn model_to_bytes(model: &LasoModel) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MODEL_MAGIC);
    out.extend_from_slice(&MODEL_VERSION.to_le_bytes());
    out.extend_from_slice(&(model.d as u64).to_le_bytes());
    out.extend_from_slice(&(model.l as u64).to_le_bytes());
    for net in [&model.m_int, &model.m_uni, &model.m_sub] {
        net_blob(&mut out, net, model.dropout, model.leaky_slope);
    }
    out.extend_from_slice(&2u32.to_le_bytes());
    let c = &model.classifier;
    put_tensor(&mut out, "weight", &c.weight.shape(), &c.weight.to_vec());
    put_tensor(&mut out, "bias", &c.bias.shape(), &c.bias.to_vec());
    out
}

type TensorMap = BTreeMap<String, (Vec<usize>, Vec<f64>)>;

fn read_blob(r: &mut Reader) -> Result<TensorMap> {
    let count = r.u32("tensor count")?;
    let mut map = TensorMap::new();
    for _ in 0..count {
        let name_len = r.u16("tensor name length")? as usize;
        let name = std::str::from_utf8(r.take(name_len, "tensor name")?)
            .map_err(|_| Error::Malformed {
                msg: "tensor name is not UTF-8".into(),
            })?
            .to_string();
        let rank = r.take(1, "tensor rank")?[0] as usize;
        let mut extents = Vec::with_capacity(rank);
        for _ in 0..rank {
            extents.push(r.u64("tensor extent")? as usize);
        }
        let numel: usize = extents.iter().product();
        let raw = r.take(8 * numel, &format!("values of `{name}`"))?;
        let values = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        if map.insert(name.clone(), (extents, values)).is_some() {
            return Err(Error::Malformed {
                msg: format!("duplicate tensor `{name}`"),
            });
        }
    }
    Ok(map)
}

fn take_tensor(map: &mut TensorMap, name: &str, extents: &[usize]) -> Result<Vec<f64>> {
    let (got_extents, values) = map.remove(name).ok_or_else(|| Error::Malformed {
        msg: format!("missing tensor `{name}`"),
    })?;
    if got_extents != extents {
        return Err(Error::Malformed {
            msg: format!("tensor `{name}` has extents {got_extents:?}, expected {extents:?}"),
        });
    }
    Ok(values)
}

fn net_from_blob(r: &mut Reader, d: usize) -> Result<(LasoOperatorNet, f64, f64)> {
    let mut map = read_blob(r)?;
    let count = map.len();
    let depth = match count {
        19 => 3,
        25 => 4,
        other => {
            return Err(Error::Malformed {
                msg: format!("operator blob has {other} tensors, expected 19 or 25"),
            })
        }
    };
    let hyper = take_tensor(&mut map, "hyper", &[2])?;
    let (dropout, leaky_slope) = (hyper[0], hyper[1]);
    let dims = block_dims(d, depth)?;
    let last = dims.len() - 1;
    let mut blocks = Vec::with_capacity(depth);
    for (i, &(out, inp)) in dims.iter().enumerate() {
        let weight = take_tensor(&mut map, &format!("blocks.{i}.weight"), &[out, inp])?;
        let bias = take_tensor(&mut map, &format!("blocks.{i}.bias"), &[out])?;
        let gamma = take_tensor(&mut map, &format!("blocks.{i}.gamma"), &[out])?;
        let beta = take_tensor(&mut map, &format!("blocks.{i}.beta"), &[out])?;
        let mean = take_tensor(&mut map, &format!("blocks.{i}.running_mean"), &[out])?;
        let var = take_tensor(&mut map, &format!("blocks.{i}.running_var"), &[out])?;
        let mut stats = RunningStats::new(out);
        stats.mean = mean;
        stats.var = var;
        blocks.push(MlpBlock {
            weight: Tensor::param(&[out, inp], weight)?,
            bias: Tensor::param(&[out], bias)?,
            gamma: Tensor::param(&[out], gamma)?,
            beta: Tensor::param(&[out], beta)?,
            stats,
            activation: if i == last {
                Activation::Relu
            } else {
                Activation::LeakyRelu(leaky_slope)
            },
            dropout: (i != last && dropout > 0.0).then_some(dropout),
        });
    }
    Ok((LasoOperatorNet { blocks }, dropout, leaky_slope))
}

pub fn model_from_bytes(buf: &[u8]) -> Result<LasoModel> {
    let mut r = Reader::new(buf);
    if r.take(4, "magic")? != MODEL_MAGIC {
        return Err(Error::BadMagic { expected: "LASO" });
    }
    let version = r.u32("version")?;
    if version != MODEL_VERSION {
        return Err(Error::UnsupportedVersion {
            found: version,
            supported: MODEL_VERSION,
        });
    }
    let d = r.u64("feature dim")? as usize;
    let l = r.u64("label count")? as usize;
    let (m_int, dropout, leaky_slope) = net_from_blob(&mut r, d)?;
    let (m_uni, ..) = net_from_blob(&mut r, d)?;
    let (m_sub, ..) = net_from_blob(&mut r, d)?;
    let mut cmap = read_blob(&mut r)?;
    let weight = take_tensor(&mut cmap, "weight", &[l, d])?;
    let bias = take_tensor(&mut cmap, "bias", &[l])?;
    if !r.done() {
        return Err(Error::Malformed {
            msg: format!("{} trailing bytes", r.remaining()),
        });
    }
    Ok(LasoModel {
        d,
        l,
        m_int,
        m_uni,
        m_sub,
        classifier: LinearClassifier::from_values(d, l, weight, bias)?,
        dropout,
        leaky_slope,
    })
}

pub fn save_model(model: &LasoModel, path: &std::path::Path) -> Result<()> {
    std::fs::write(path, model_to_bytes(model))?;
    Ok(())
}

pub fn load_model(path: &std::path::Path) -> Result<LasoModel> {
    model_from_bytes(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate_bank, oracle_decode, GeneratorSpec};

    #[test]
    fn parses_nested_expressions() {
        assert_eq!(parse_expr("42").unwrap(), SetExpr::Sample(42));
        let e = parse_expr(" uni ( 3 , int(4, sub(5,6)) ) ").unwrap();
        assert_eq!(
            e,
            SetExpr::Op(
                OpKind::Union,
                Box::new(SetExpr::Sample(3)),
                Box::new(SetExpr::Op(
                    OpKind::Intersection,
                    Box::new(SetExpr::Sample(4)),
                    Box::new(SetExpr::Op(
                        OpKind::Subtraction,
                        Box::new(SetExpr::Sample(5)),
                        Box::new(SetExpr::Sample(6)),
                    )),
                )),
            )
        );
    }

    #[test]
    fn rejects_malformed_expressions() {
        for bad in ["", "uni(1", "foo(1,2)", "uni(1,2)x", "uni(1;2)", "uni(,1)"] {
            assert!(
                matches!(parse_expr(bad), Err(Error::ExprParse { .. })),
                "`{bad}` should not parse"
            );
        }
    }

    #[test]
    fn analytic_operator_values() {
        let fx = [1.0, 0.0, 2.0];
        let fy = [0.5, 0.3, 2.5];
        let v = AnalyticVariant::MinMax;
        assert_eq!(
            analytic_op(OpKind::Union, v, &fx, &fy).unwrap(),
            vec![1.0, 0.3, 2.5]
        );
        assert_eq!(
            analytic_op(OpKind::Intersection, v, &fx, &fy).unwrap(),
            vec![0.5, 0.0, 2.0]
        );
        assert_eq!(
            analytic_op(OpKind::Subtraction, v, &fx, &fy).unwrap(),
            vec![0.5, 0.0, 0.0]
        );
        let a = AnalyticVariant::Arithmetic;
        assert_eq!(
            analytic_op(OpKind::Union, a, &fx, &fy).unwrap(),
            vec![1.5, 0.3, 4.5]
        );
        assert_eq!(
            analytic_op(OpKind::Intersection, a, &fx, &fy).unwrap(),
            vec![0.5, 0.0, 5.0]
        );
        assert_eq!(
            analytic_op(OpKind::Subtraction, a, &fx, &fy).unwrap(),
            vec![0.5, -0.3, -0.5]
        );
        assert!(analytic_op(OpKind::Union, v, &fx, &fy[..2]).is_err());
    }

    #[test]
    fn composed_analytic_expressions_track_label_algebra() {
        let spec = GeneratorSpec::clean_disjoint(64, 20, 16);
        let bank = generate_bank(&spec, 60, 4).unwrap();
        let layout = spec.block_layout().unwrap();
        let route = OpRoute::Analytic(AnalyticVariant::MinMax);
        for (i, j, k) in [
            (0usize, 1usize, 2usize),
            (5, 9, 33),
            (40, 41, 7),
            (10, 10, 10),
        ] {
            let e = parse_expr(&format!("uni({i},sub(int({j},{k}),{i}))")).unwrap();
            let (f, lset) = compose_expression(&e, &bank, &route).unwrap();
            assert_eq!(oracle_decode(&layout, &f, 0.5).unwrap(), lset);
        }
        let beyond = SetExpr::Sample(60);
        assert!(matches!(
            compose_expression(&beyond, &bank, &route),
            Err(Error::SampleOutOfRange { id: 60, len: 60 })
        ));
    }

    #[test]
    fn learned_operator_eval_is_deterministic() {
        let model = LasoModel::new(8, 4, 3, 0.3, 0.01, 11).unwrap();
        let fx = vec![0.5; 8];
        let fy: Vec<f64> = (0..8).map(|i| i as f64 / 8.0).collect();
        let a = model.apply_operator(OpKind::Union, &fx, &fy).unwrap();
        let b = model.apply_operator(OpKind::Union, &fx, &fy).unwrap();
        assert_eq!(a.len(), 8);
        assert!(a.iter().all(|v| v.is_finite() && *v >= 0.0));
        assert_eq!(a, b);
        // Batched application agrees with one-row application.
        let mut xs = fx.clone();
        xs.extend_from_slice(&fy);
        let mut ys = fy.clone();
        ys.extend_from_slice(&fx);
        let z = model
            .apply_operator_rows(OpKind::Union, &xs, &ys, 2)
            .unwrap();
        assert_eq!(&z[..8], &a[..]);
    }

    #[test]
    fn train_forward_reaches_every_parameter() {
        let mut model = LasoModel::new(6, 3, 4, 0.3, 0.01, 5).unwrap();
        let mut rng = StdRng::seed_from_u64(2);
        let batch = 4;
        let x = Tensor::new(
            &[batch, 6],
            (0..batch * 6).map(|i| 0.1 * i as f64).collect(),
        )
        .unwrap();
        let y = Tensor::new(&[batch, 6], vec![0.2; batch * 6]).unwrap();
        let masks = model.m_uni.draw_masks(batch, &mut rng);
        let mut tape = Tape::new();
        let z = model
            .m_uni
            .forward_train(&mut tape, &x, &y, &masks, true)
            .unwrap();
        assert_eq!(z.shape(), vec![batch, 6]);
        let sq = tape.square(&z);
        let loss = tape.mean(&sq);
        tape.backward(&loss).unwrap();
        for (name, p) in model.m_uni.named_params("m_uni") {
            assert!(p.grad().is_some(), "no gradient for {name}");
        }
        // Mask count must match the block count.
        assert!(model
            .m_uni
            .forward_train(&mut Tape::new(), &x, &y, &masks[..2], true)
            .is_err());
    }

    #[test]
    fn block_oracle_classifier_separates_clean_banks() {
        let spec = GeneratorSpec::clean_disjoint(64, 20, 16);
        let bank = generate_bank(&spec, 80, 8).unwrap();
        let clf = LinearClassifier::block_oracle(&spec.block_layout().unwrap());
        let mut tape = Tape::new();
        for i in 0..bank.n() {
            let x = Tensor::new(&[1, 64], bank.feature(i).to_vec()).unwrap();
            let scores = clf.scores(&mut tape, &x).unwrap().to_vec();
            let row = bank.label_row(i);
            for k in 0..20 {
                assert_eq!(scores[k] > 0.0, row[k] == 1, "sample {i} label {k}");
            }
        }
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.laso");
        let mut model = LasoModel::new(10, 5, 3, 0.3, 0.01, 77).unwrap();
        // Perturb running stats away from their defaults so they are covered.
        model.m_int.blocks[0].stats.mean[0] = 0.123456789;
        model.m_sub.blocks[2].stats.var[3] = 2.5;
        save_model(&model, &path).unwrap();
        let loaded = load_model(&path).unwrap();
        assert_eq!(loaded.d, 10);
        assert_eq!(loaded.l, 5);
        assert_eq!(loaded.dropout, 0.3);
        assert_eq!(loaded.operators_checksum(), model.operators_checksum());
        assert_eq!(loaded.classifier_checksum(), model.classifier_checksum());
        let bytes1 = std::fs::read(&path).unwrap();
        save_model(&loaded, &path).unwrap();
        let bytes2 = std::fs::read(&path).unwrap();
        assert_eq!(bytes1, bytes2);
    }

    #[test]
    fn corrupt_checkpoints_give_typed_errors() {
        let model = LasoModel::new(6, 3, 3, 0.3, 0.01, 1).unwrap();
        let bytes = model_to_bytes(&model);

        let mut wrong_magic = bytes.clone();
        wrong_magic[0] = b'Z';
        assert!(matches!(
            model_from_bytes(&wrong_magic),
            Err(Error::BadMagic { .. })
        ));

        assert!(matches!(
            model_from_bytes(&bytes[..bytes.len() / 2]),
            Err(Error::Truncated { .. })
        ));

        let mut bad_version = bytes.clone();
        bad_version[4..8].copy_from_slice(&3u32.to_le_bytes());
        assert!(matches!(
            model_from_bytes(&bad_version),
            Err(Error::UnsupportedVersion { found: 3, .. })
        ));

        let mut trailing = bytes.clone();
        trailing.extend_from_slice(&[1, 2, 3]);
        assert!(matches!(
            model_from_bytes(&trailing),
            Err(Error::Malformed { .. })
        ));
    }

    #[test]
    fn checksums_separate_classifier_from_operators() {
        let model = LasoModel::new(6, 3, 3, 0.3, 0.01, 9).unwrap();
        let ops0 = model.operators_checksum();
        let clf0 = model.classifier_checksum();

        let mut w = model.classifier.weight.to_vec();
        w[0] += 1.0;
        model.classifier.weight.set_values(&w);
        assert_eq!(model.operators_checksum(), ops0);
        assert_ne!(model.classifier_checksum(), clf0);

        let (_, p) = &model.operator_params()[0];
        let mut v = p.to_vec();
        v[0] += 1.0;
        p.set_values(&v);
        assert_ne!(model.operators_checksum(), ops0);
    }
}
