//! Dense f64 tensors and a record/replay gradient tape.
//!
//! The op set is exactly what the operator networks and the loss stack need:
//! matmul (plain and transposed-rhs), bias add, last-dim concat, a handful of
//! elementwise maps, scalar reductions, per-row L2 norm, batch norm, inverted
//! dropout and a fused logits-BCE. Tensor values are immutable once an op has
//! produced them; gradients live in per-tensor buffers that accumulate across
//! `backward` calls until explicitly cleared.

mod adam;
pub mod gradcheck;
mod sched;

pub use adam::Adam;
pub use sched::PlateauScheduler;

use std::cell::{Ref, RefCell};
use std::collections::HashMap;
use std::rc::Rc;

use rand::rngs::StdRng;
use rand::Rng;

use crate::{Error, Result};

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// ln(1 + e^x) without overflow for large |x|.
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Shared handle to a shaped f64 buffer. Cloning is cheap and aliases the
/// same storage, which is how optimizer updates become visible to the nets.
#[derive(Clone)]
pub struct Tensor {
    inner: Rc<RefCell<TensorData>>,
}

struct TensorData {
    shape: Vec<usize>,
    values: Vec<f64>,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: &[usize], values: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != values.len() {
            return Err(Error::InvalidArg {
                op: "tensor",
                msg: format!(
                    "shape {:?} holds {} values, got {}",
                    shape,
                    numel,
                    values.len()
                ),
            });
        }
        Ok(Self::raw(shape.to_vec(), values, false))
    }

    /// Leaf with `requires_grad` set; gradients accumulate here.
    pub fn param(shape: &[usize], values: Vec<f64>) -> Result<Self> {
        let t = Self::new(shape, values)?;
        t.set_requires_grad(true);
        Ok(t)
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Self::raw(shape.to_vec(), vec![0.0; numel], false)
    }

    pub fn scalar(v: f64) -> Self {
        Self::raw(Vec::new(), vec![v], false)
    }

    fn raw(shape: Vec<usize>, values: Vec<f64>, requires_grad: bool) -> Self {
        Tensor {
            inner: Rc::new(RefCell::new(TensorData {
                shape,
                values,
                requires_grad,
                grad: None,
            })),
        }
    }

    pub fn shape(&self) -> Vec<usize> {
        self.inner.borrow().shape.clone()
    }

    pub fn numel(&self) -> usize {
        self.inner.borrow().values.len()
    }

    pub fn values(&self) -> Ref<'_, [f64]> {
        Ref::map(self.inner.borrow(), |d| d.values.as_slice())
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.inner.borrow().values.clone()
    }

    /// Value of a single-element tensor. Panics on anything else; callers
    /// only use it on recorded scalar losses.
    pub fn item(&self) -> f64 {
        let d = self.inner.borrow();
        assert_eq!(d.values.len(), 1, "item() on tensor of shape {:?}", d.shape);
        d.values[0]
    }

    /// Overwrites values in place; the shape is fixed at construction.
    pub fn set_values(&self, values: &[f64]) {
        let mut d = self.inner.borrow_mut();
        assert_eq!(d.values.len(), values.len(), "set_values length mismatch");
        d.values.copy_from_slice(values);
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.borrow().requires_grad
    }

    pub fn set_requires_grad(&self, on: bool) {
        self.inner.borrow_mut().requires_grad = on;
    }

    pub fn grad(&self) -> Option<Vec<f64>> {
        self.inner.borrow().grad.clone()
    }

    pub fn zero_grad(&self) {
        self.inner.borrow_mut().grad = None;
    }

    fn accumulate(&self, delta: &[f64]) {
        let mut d = self.inner.borrow_mut();
        match &mut d.grad {
            Some(g) => {
                for (gi, di) in g.iter_mut().zip(delta) {
                    *gi += di;
                }
            }
            None => d.grad = Some(delta.to_vec()),
        }
    }

    fn ptr(&self) -> usize {
        Rc::as_ptr(&self.inner) as usize
    }
}

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let d = self.inner.borrow();
        f.debug_struct("Tensor")
            .field("shape", &d.shape)
            .field("values", &d.values)
            .finish()
    }
}

/// Running batch-norm statistics. Not differentiable state: updated as a
/// side effect of train-mode forwards, read by eval-mode forwards.
#[derive(Debug, Clone, PartialEq)]
pub struct RunningStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub momentum: f64,
    pub eps: f64,
}

impl RunningStats {
    pub fn new(dim: usize) -> Self {
        RunningStats {
            mean: vec![0.0; dim],
            var: vec![1.0; dim],
            momentum: 0.1,
            eps: 1e-5,
        }
    }
}

/// Scaled inverted-dropout mask: entries are 0 or 1/(1-rate). Drawn once and
/// reusable so that several forwards can share the same realization.
pub fn dropout_mask(numel: usize, rate: f64, rng: &mut StdRng) -> Rc<Vec<f64>> {
    assert!(
        (0.0..1.0).contains(&rate),
        "dropout rate {rate} out of range"
    );
    let keep = 1.0 - rate;
    let mask = (0..numel)
        .map(|_| {
            if rng.random::<f64>() < keep {
                1.0 / keep
            } else {
                0.0
            }
        })
        .collect();
    Rc::new(mask)
}

enum Op {
    Matmul {
        a: Tensor,
        b: Tensor,
    },
    MatmulTb {
        a: Tensor,
        b: Tensor,
    },
    AddBias {
        x: Tensor,
        bias: Tensor,
    },
    ConcatLast {
        a: Tensor,
        b: Tensor,
    },
    Add {
        a: Tensor,
        b: Tensor,
    },
    Sub {
        a: Tensor,
        b: Tensor,
    },
    Mul {
        a: Tensor,
        b: Tensor,
    },
    Max {
        a: Tensor,
        b: Tensor,
    },
    Min {
        a: Tensor,
        b: Tensor,
    },
    Relu {
        x: Tensor,
    },
    LeakyRelu {
        x: Tensor,
        slope: f64,
    },
    Sigmoid {
        x: Tensor,
    },
    Log {
        x: Tensor,
    },
    Square {
        x: Tensor,
    },
    Scale {
        x: Tensor,
        c: f64,
    },
    Sum {
        x: Tensor,
    },
    Mean {
        x: Tensor,
    },
    RowNorm {
        x: Tensor,
    },
    BatchNormTrain {
        x: Tensor,
        gamma: Tensor,
        beta: Tensor,
        x_hat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    BatchNormEval {
        x: Tensor,
        gamma: Tensor,
        beta: Tensor,
        x_hat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Dropout {
        x: Tensor,
        mask: Rc<Vec<f64>>,
    },
    BceWithLogits {
        scores: Tensor,
        targets: Vec<f64>,
        rows: usize,
    },
}

struct Record {
    op: Op,
    out: Tensor,
}

/// Wengert list. Ops are recorded in execution order, which is already a
/// topological order for the replay in `backward`.
#[derive(Default)]
pub struct Tape {
    records: Vec<Record>,
}

fn mismatch(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Error {
    Error::ShapeMismatch {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    fn push(&mut self, op: Op, shape: Vec<usize>, values: Vec<f64>, track: bool) -> Tensor {
        let out = Tensor::raw(shape, values, track);
        if track {
            self.records.push(Record {
                op,
                out: out.clone(),
            });
        }
        out
    }

    pub fn matmul(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        let (sa, sb) = (a.shape(), b.shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(mismatch("matmul", &sa, &sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        {
            let av = a.values();
            let bv = b.values();
            for i in 0..m {
                let dst = &mut out[i * n..(i + 1) * n];
                for p in 0..k {
                    let x = av[i * k + p];
                    let row = &bv[p * n..(p + 1) * n];
                    for j in 0..n {
                        dst[j] += x * row[j];
                    }
                }
            }
        }
        let track = a.requires_grad() || b.requires_grad();
        Ok(self.push(
            Op::Matmul {
                a: a.clone(),
                b: b.clone(),
            },
            vec![m, n],
            out,
            track,
        ))
    }

    /// a @ b^T with b stored row-major as (n, k); the layout linear layers use.
    pub fn matmul_tb(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        let (sa, sb) = (a.shape(), b.shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[1] {
            return Err(mismatch("matmul_tb", &sa, &sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[0]);
        let mut out = vec![0.0; m * n];
        {
            let av = a.values();
            let bv = b.values();
            for i in 0..m {
                let ai = &av[i * k..(i + 1) * k];
                let dst = &mut out[i * n..(i + 1) * n];
                for (j, d) in dst.iter_mut().enumerate() {
                    let bj = &bv[j * k..(j + 1) * k];
                    let mut acc = 0.0;
                    for p in 0..k {
                        acc += ai[p] * bj[p];
                    }
                    *d = acc;
                }
            }
        }
        let track = a.requires_grad() || b.requires_grad();
        Ok(self.push(
            Op::MatmulTb {
                a: a.clone(),
                b: b.clone(),
            },
            vec![m, n],
            out,
            track,
        ))
    }

    /// Adds a length-f bias to every row of an (n, f) matrix.
    pub fn add_bias(&mut self, x: &Tensor, bias: &Tensor) -> Result<Tensor> {
        let (sx, sb) = (x.shape(), bias.shape());
        if sx.len() != 2 || sb.len() != 1 || sx[1] != sb[0] {
            return Err(mismatch("add_bias", &sx, &sb));
        }
        let (n, f) = (sx[0], sx[1]);
        let mut out = vec![0.0; n * f];
        {
            let xv = x.values();
            let bv = bias.values();
            for i in 0..n {
                for j in 0..f {
                    out[i * f + j] = xv[i * f + j] + bv[j];
                }
            }
        }
        let track = x.requires_grad() || bias.requires_grad();
        Ok(self.push(
            Op::AddBias {
                x: x.clone(),
                bias: bias.clone(),
            },
            vec![n, f],
            out,
            track,
        ))
    }

    /// Concatenates two (n, *) matrices along the last dimension.
    pub fn concat_lastdim(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        let (sa, sb) = (a.shape(), b.shape());
        if sa.len() != 2 || sb.len() != 2 || sa[0] != sb[0] {
            return Err(mismatch("concat_lastdim", &sa, &sb));
        }
        let (n, p, q) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; n * (p + q)];
        {
            let av = a.values();
            let bv = b.values();
            for i in 0..n {
                out[i * (p + q)..i * (p + q) + p].copy_from_slice(&av[i * p..(i + 1) * p]);
                out[i * (p + q) + p..(i + 1) * (p + q)].copy_from_slice(&bv[i * q..(i + 1) * q]);
            }
        }
        let track = a.requires_grad() || b.requires_grad();
        Ok(self.push(
            Op::ConcatLast {
                a: a.clone(),
                b: b.clone(),
            },
            vec![n, p + q],
            out,
            track,
        ))
    }

    fn binary(
        &mut self,
        op_name: &'static str,
        a: &Tensor,
        b: &Tensor,
        f: impl Fn(f64, f64) -> f64,
        make: impl FnOnce(Tensor, Tensor) -> Op,
    ) -> Result<Tensor> {
        let (sa, sb) = (a.shape(), b.shape());
        if sa != sb {
            return Err(mismatch(op_name, &sa, &sb));
        }
        let out = {
            let av = a.values();
            let bv = b.values();
            av.iter().zip(bv.iter()).map(|(&x, &y)| f(x, y)).collect()
        };
        let track = a.requires_grad() || b.requires_grad();
        Ok(self.push(make(a.clone(), b.clone()), sa, out, track))
    }

    pub fn add(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        self.binary("add", a, b, |x, y| x + y, |a, b| Op::Add { a, b })
    }

    pub fn sub(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        self.binary("sub", a, b, |x, y| x - y, |a, b| Op::Sub { a, b })
    }

    pub fn mul(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        self.binary("mul", a, b, |x, y| x * y, |a, b| Op::Mul { a, b })
    }

    pub fn max(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        self.binary("max", a, b, f64::max, |a, b| Op::Max { a, b })
    }

    pub fn min(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        self.binary("min", a, b, f64::min, |a, b| Op::Min { a, b })
    }

    fn unary(
        &mut self,
        x: &Tensor,
        f: impl Fn(f64) -> f64,
        make: impl FnOnce(Tensor) -> Op,
    ) -> Tensor {
        let out = x.values().iter().map(|&v| f(v)).collect();
        self.push(make(x.clone()), x.shape(), out, x.requires_grad())
    }

    pub fn relu(&mut self, x: &Tensor) -> Tensor {
        self.unary(x, |v| v.max(0.0), |x| Op::Relu { x })
    }

    pub fn leaky_relu(&mut self, x: &Tensor, slope: f64) -> Tensor {
        self.unary(
            x,
            |v| if v > 0.0 { v } else { slope * v },
            |x| Op::LeakyRelu { x, slope },
        )
    }

    pub fn sigmoid(&mut self, x: &Tensor) -> Tensor {
        self.unary(x, sigmoid, |x| Op::Sigmoid { x })
    }

    pub fn log(&mut self, x: &Tensor) -> Result<Tensor> {
        if x.values().iter().any(|&v| v <= 0.0) {
            return Err(Error::InvalidArg {
                op: "log",
                msg: "requires strictly positive inputs".into(),
            });
        }
        Ok(self.unary(x, f64::ln, |x| Op::Log { x }))
    }

    pub fn square(&mut self, x: &Tensor) -> Tensor {
        self.unary(x, |v| v * v, |x| Op::Square { x })
    }

    pub fn scale(&mut self, x: &Tensor, c: f64) -> Tensor {
        self.unary(x, |v| c * v, |x| Op::Scale { x, c })
    }

    pub fn sum(&mut self, x: &Tensor) -> Tensor {
        let total = x.values().iter().sum();
        self.push(
            Op::Sum { x: x.clone() },
            Vec::new(),
            vec![total],
            x.requires_grad(),
        )
    }

    pub fn mean(&mut self, x: &Tensor) -> Tensor {
        let n = x.numel() as f64;
        let total: f64 = x.values().iter().sum();
        self.push(
            Op::Mean { x: x.clone() },
            Vec::new(),
            vec![total / n],
            x.requires_grad(),
        )
    }

    /// Per-row Euclidean norm of an (n, f) matrix, producing shape (n,).
    pub fn row_norm(&mut self, x: &Tensor) -> Result<Tensor> {
        let sx = x.shape();
        if sx.len() != 2 {
            return Err(Error::InvalidArg {
                op: "row_norm",
                msg: format!("expected a matrix, got shape {:?}", sx),
            });
        }
        let (n, f) = (sx[0], sx[1]);
        let out = {
            let xv = x.values();
            (0..n)
                .map(|i| {
                    xv[i * f..(i + 1) * f]
                        .iter()
                        .map(|v| v * v)
                        .sum::<f64>()
                        .sqrt()
                })
                .collect()
        };
        Ok(self.push(
            Op::RowNorm { x: x.clone() },
            vec![n],
            out,
            x.requires_grad(),
        ))
    }

    /// Train-mode batch norm over the rows of an (n, f) matrix. Normalizes by
    /// the biased batch variance; folds the batch statistics into `stats`
    /// only when `update_stats` is set, so auxiliary forwards over
    /// off-distribution inputs cannot skew eval-time normalization.
    pub fn batch_norm_train(
        &mut self,
        x: &Tensor,
        gamma: &Tensor,
        beta: &Tensor,
        stats: &mut RunningStats,
        update_stats: bool,
    ) -> Result<Tensor> {
        let (sx, sg, sb) = (x.shape(), gamma.shape(), beta.shape());
        if sx.len() != 2 || sg != vec![sx[1]] || sb != vec![sx[1]] {
            return Err(mismatch("batch_norm", &sx, &sg));
        }
        let (n, f) = (sx[0], sx[1]);
        if stats.mean.len() != f {
            return Err(Error::LengthMismatch {
                op: "batch_norm",
                lhs: stats.mean.len(),
                rhs: f,
            });
        }
        let mut mean = vec![0.0; f];
        let mut var = vec![0.0; f];
        let mut x_hat = vec![0.0; n * f];
        let mut out = vec![0.0; n * f];
        let mut inv_std = vec![0.0; f];
        {
            let xv = x.values();
            let gv = gamma.values();
            let bv = beta.values();
            for j in 0..f {
                for i in 0..n {
                    mean[j] += xv[i * f + j];
                }
                mean[j] /= n as f64;
                for i in 0..n {
                    let c = xv[i * f + j] - mean[j];
                    var[j] += c * c;
                }
                var[j] /= n as f64;
                inv_std[j] = 1.0 / (var[j] + stats.eps).sqrt();
                for i in 0..n {
                    let h = (xv[i * f + j] - mean[j]) * inv_std[j];
                    x_hat[i * f + j] = h;
                    out[i * f + j] = gv[j] * h + bv[j];
                }
            }
        }
        if update_stats {
            let m = stats.momentum;
            for j in 0..f {
                stats.mean[j] = (1.0 - m) * stats.mean[j] + m * mean[j];
                stats.var[j] = (1.0 - m) * stats.var[j] + m * var[j];
            }
        }
        let track = x.requires_grad() || gamma.requires_grad() || beta.requires_grad();
        Ok(self.push(
            Op::BatchNormTrain {
                x: x.clone(),
                gamma: gamma.clone(),
                beta: beta.clone(),
                x_hat,
                inv_std,
            },
            vec![n, f],
            out,
            track,
        ))
    }

    /// Eval-mode batch norm: a deterministic affine map by running statistics.
    pub fn batch_norm_eval(
        &mut self,
        x: &Tensor,
        gamma: &Tensor,
        beta: &Tensor,
        stats: &RunningStats,
    ) -> Result<Tensor> {
        let (sx, sg, sb) = (x.shape(), gamma.shape(), beta.shape());
        if sx.len() != 2 || sg != vec![sx[1]] || sb != vec![sx[1]] {
            return Err(mismatch("batch_norm", &sx, &sg));
        }
        let (n, f) = (sx[0], sx[1]);
        if stats.mean.len() != f {
            return Err(Error::LengthMismatch {
                op: "batch_norm",
                lhs: stats.mean.len(),
                rhs: f,
            });
        }
        let inv_std: Vec<f64> = stats
            .var
            .iter()
            .map(|&v| 1.0 / (v + stats.eps).sqrt())
            .collect();
        let mut x_hat = vec![0.0; n * f];
        let mut out = vec![0.0; n * f];
        {
            let xv = x.values();
            let gv = gamma.values();
            let bv = beta.values();
            for i in 0..n {
                for j in 0..f {
                    let h = (xv[i * f + j] - stats.mean[j]) * inv_std[j];
                    x_hat[i * f + j] = h;
                    out[i * f + j] = gv[j] * h + bv[j];
                }
            }
        }
        let track = x.requires_grad() || gamma.requires_grad() || beta.requires_grad();
        Ok(self.push(
            Op::BatchNormEval {
                x: x.clone(),
                gamma: gamma.clone(),
                beta: beta.clone(),
                x_hat,
                inv_std,
            },
            vec![n, f],
            out,
            track,
        ))
    }

    /// Inverted dropout with a freshly drawn mask.
    pub fn dropout(&mut self, x: &Tensor, rate: f64, rng: &mut StdRng) -> Result<Tensor> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::InvalidArg {
                op: "dropout",
                msg: format!("rate {rate} not in [0, 1)"),
            });
        }
        let mask = dropout_mask(x.numel(), rate, rng);
        self.dropout_masked(x, &mask)
    }

    /// Inverted dropout with a caller-supplied mask, so several forwards can
    /// share one realization.
    pub fn dropout_masked(&mut self, x: &Tensor, mask: &Rc<Vec<f64>>) -> Result<Tensor> {
        if mask.len() != x.numel() {
            return Err(Error::LengthMismatch {
                op: "dropout",
                lhs: mask.len(),
                rhs: x.numel(),
            });
        }
        let out = x
            .values()
            .iter()
            .zip(mask.iter())
            .map(|(&v, &m)| v * m)
            .collect();
        let track = x.requires_grad();
        Ok(self.push(
            Op::Dropout {
                x: x.clone(),
                mask: Rc::clone(mask),
            },
            x.shape(),
            out,
            track,
        ))
    }

    /// Multi-label BCE on raw scores against targets in [0, 1]: per row the
    /// sum over classes of softplus(s) - t*s, averaged over rows. Stable for
    /// any finite score.
    pub fn bce_with_logits(&mut self, scores: &Tensor, targets: &[f64]) -> Result<Tensor> {
        let shape = scores.shape();
        if shape.len() > 2 {
            return Err(Error::InvalidArg {
                op: "bce",
                msg: format!("expected vector or matrix scores, got {:?}", shape),
            });
        }
        if scores.numel() != targets.len() {
            return Err(Error::LengthMismatch {
                op: "bce",
                lhs: scores.numel(),
                rhs: targets.len(),
            });
        }
        if let Some(t) = targets.iter().find(|t| !(0.0..=1.0).contains(*t)) {
            return Err(Error::InvalidArg {
                op: "bce",
                msg: format!("target {t} outside [0, 1]"),
            });
        }
        let rows = if shape.len() == 2 { shape[0] } else { 1 };
        let total: f64 = {
            let sv = scores.values();
            sv.iter()
                .zip(targets)
                .map(|(&s, &t)| softplus(s) - t * s)
                .sum()
        };
        let track = scores.requires_grad();
        Ok(self.push(
            Op::BceWithLogits {
                scores: scores.clone(),
                targets: targets.to_vec(),
                rows,
            },
            Vec::new(),
            vec![total / rows.max(1) as f64],
            track,
        ))
    }

    /// Reverse replay. Seeds d(loss)/d(loss) = 1 and accumulates gradients
    /// into every `requires_grad` leaf reachable from `loss`. Intermediate
    /// flows use scratch buffers, so calling backward again adds exactly one
    /// more gradient contribution to the leaves.
    pub fn backward(&mut self, loss: &Tensor) -> Result<()> {
        if loss.numel() != 1 {
            return Err(Error::NotScalar {
                op: "backward",
                shape: loss.shape(),
            });
        }
        let mut produced: HashMap<usize, usize> = HashMap::new();
        for (i, r) in self.records.iter().enumerate() {
            produced.insert(r.out.ptr(), i);
        }
        let Some(&seed) = produced.get(&loss.ptr()) else {
            return Err(Error::LossNotOnTape);
        };
        let mut scratch: Vec<Option<Vec<f64>>> = (0..self.records.len()).map(|_| None).collect();
        scratch[seed] = Some(vec![1.0]);

        for i in (0..=seed).rev() {
            let Some(g) = scratch[i].take() else { continue };
            let rec = &self.records[i];
            backward_op(&rec.op, &rec.out, &g, &produced, &mut scratch);
        }
        Ok(())
    }
}

fn wants(t: &Tensor, produced: &HashMap<usize, usize>) -> bool {
    t.requires_grad() || produced.contains_key(&t.ptr())
}

fn route(
    t: &Tensor,
    delta: Vec<f64>,
    produced: &HashMap<usize, usize>,
    scratch: &mut [Option<Vec<f64>>],
) {
    if let Some(&idx) = produced.get(&t.ptr()) {
        match &mut scratch[idx] {
            Some(buf) => {
                for (b, d) in buf.iter_mut().zip(&delta) {
                    *b += d;
                }
            }
            None => scratch[idx] = Some(delta),
        }
    } else if t.requires_grad() {
        t.accumulate(&delta);
    }
}

fn backward_op(
    op: &Op,
    out: &Tensor,
    g: &[f64],
    produced: &HashMap<usize, usize>,
    scratch: &mut [Option<Vec<f64>>],
) {
    match op {
        Op::Matmul { a, b } => {
            let sa = a.shape();
            let sb = b.shape();
            let (m, k, n) = (sa[0], sa[1], sb[1]);
            if wants(a, produced) {
                let bv = b.values();
                let mut da = vec![0.0; m * k];
                for i in 0..m {
                    for p in 0..k {
                        let bp = &bv[p * n..(p + 1) * n];
                        let gi = &g[i * n..(i + 1) * n];
                        let mut acc = 0.0;
                        for j in 0..n {
                            acc += gi[j] * bp[j];
                        }
                        da[i * k + p] = acc;
                    }
                }
                drop(bv);
                route(a, da, produced, scratch);
            }
            if wants(b, produced) {
                let av = a.values();
                let mut db = vec![0.0; k * n];
                for i in 0..m {
                    let gi = &g[i * n..(i + 1) * n];
                    for p in 0..k {
                        let x = av[i * k + p];
                        let dp = &mut db[p * n..(p + 1) * n];
                        for j in 0..n {
                            dp[j] += x * gi[j];
                        }
                    }
                }
                drop(av);
                route(b, db, produced, scratch);
            }
        }
        Op::MatmulTb { a, b } => {
            let sa = a.shape();
            let sb = b.shape();
            let (m, k, n) = (sa[0], sa[1], sb[0]);
            if wants(a, produced) {
                let bv = b.values();
                let mut da = vec![0.0; m * k];
                for i in 0..m {
                    let gi = &g[i * n..(i + 1) * n];
                    let di = &mut da[i * k..(i + 1) * k];
                    for j in 0..n {
                        let x = gi[j];
                        let bj = &bv[j * k..(j + 1) * k];
                        for p in 0..k {
                            di[p] += x * bj[p];
                        }
                    }
                }
                drop(bv);
                route(a, da, produced, scratch);
            }
            if wants(b, produced) {
                let av = a.values();
                let mut db = vec![0.0; n * k];
                for i in 0..m {
                    let gi = &g[i * n..(i + 1) * n];
                    let ai = &av[i * k..(i + 1) * k];
                    for j in 0..n {
                        let x = gi[j];
                        let dj = &mut db[j * k..(j + 1) * k];
                        for p in 0..k {
                            dj[p] += x * ai[p];
                        }
                    }
                }
                drop(av);
                route(b, db, produced, scratch);
            }
        }
        Op::AddBias { x, bias } => {
            let sx = x.shape();
            let (n, f) = (sx[0], sx[1]);
            if wants(x, produced) {
                route(x, g.to_vec(), produced, scratch);
            }
            if wants(bias, produced) {
                let mut db = vec![0.0; f];
                for i in 0..n {
                    for j in 0..f {
                        db[j] += g[i * f + j];
                    }
                }
                route(bias, db, produced, scratch);
            }
        }
        Op::ConcatLast { a, b } => {
            let sa = a.shape();
            let sb = b.shape();
            let (n, p, q) = (sa[0], sa[1], sb[1]);
            if wants(a, produced) {
                let mut da = vec![0.0; n * p];
                for i in 0..n {
                    da[i * p..(i + 1) * p].copy_from_slice(&g[i * (p + q)..i * (p + q) + p]);
                }
                route(a, da, produced, scratch);
            }
            if wants(b, produced) {
                let mut db = vec![0.0; n * q];
                for i in 0..n {
                    db[i * q..(i + 1) * q].copy_from_slice(&g[i * (p + q) + p..(i + 1) * (p + q)]);
                }
                route(b, db, produced, scratch);
            }
        }
        Op::Add { a, b } => {
            if wants(a, produced) {
                route(a, g.to_vec(), produced, scratch);
            }
            if wants(b, produced) {
                route(b, g.to_vec(), produced, scratch);
            }
        }
        Op::Sub { a, b } => {
            if wants(a, produced) {
                route(a, g.to_vec(), produced, scratch);
            }
            if wants(b, produced) {
                route(b, g.iter().map(|v| -v).collect(), produced, scratch);
            }
        }
        Op::Mul { a, b } => {
            if wants(a, produced) {
                let da = b.values().iter().zip(g).map(|(&y, &gi)| y * gi).collect();
                route(a, da, produced, scratch);
            }
            if wants(b, produced) {
                let db = a.values().iter().zip(g).map(|(&x, &gi)| x * gi).collect();
                route(b, db, produced, scratch);
            }
        }
        // Ties route the gradient to the first argument.
        Op::Max { a, b } => {
            let (av, bv) = (a.to_vec(), b.to_vec());
            if wants(a, produced) {
                let da = (0..g.len())
                    .map(|i| if av[i] >= bv[i] { g[i] } else { 0.0 })
                    .collect();
                route(a, da, produced, scratch);
            }
            if wants(b, produced) {
                let db = (0..g.len())
                    .map(|i| if av[i] < bv[i] { g[i] } else { 0.0 })
                    .collect();
                route(b, db, produced, scratch);
            }
        }
        Op::Min { a, b } => {
            let (av, bv) = (a.to_vec(), b.to_vec());
            if wants(a, produced) {
                let da = (0..g.len())
                    .map(|i| if av[i] <= bv[i] { g[i] } else { 0.0 })
                    .collect();
                route(a, da, produced, scratch);
            }
            if wants(b, produced) {
                let db = (0..g.len())
                    .map(|i| if av[i] > bv[i] { g[i] } else { 0.0 })
                    .collect();
                route(b, db, produced, scratch);
            }
        }
        Op::Relu { x } => {
            if wants(x, produced) {
                let dx = x
                    .values()
                    .iter()
                    .zip(g)
                    .map(|(&v, &gi)| if v > 0.0 { gi } else { 0.0 })
                    .collect();
                route(x, dx, produced, scratch);
            }
        }
        Op::LeakyRelu { x, slope } => {
            if wants(x, produced) {
                let dx = x
                    .values()
                    .iter()
                    .zip(g)
                    .map(|(&v, &gi)| if v > 0.0 { gi } else { slope * gi })
                    .collect();
                route(x, dx, produced, scratch);
            }
        }
        Op::Sigmoid { x } => {
            if wants(x, produced) {
                let dx = out
                    .values()
                    .iter()
                    .zip(g)
                    .map(|(&y, &gi)| gi * y * (1.0 - y))
                    .collect();
                route(x, dx, produced, scratch);
            }
        }
        Op::Log { x } => {
            if wants(x, produced) {
                let dx = x.values().iter().zip(g).map(|(&v, &gi)| gi / v).collect();
                route(x, dx, produced, scratch);
            }
        }
        Op::Square { x } => {
            if wants(x, produced) {
                let dx = x
                    .values()
                    .iter()
                    .zip(g)
                    .map(|(&v, &gi)| 2.0 * v * gi)
                    .collect();
                route(x, dx, produced, scratch);
            }
        }
        Op::Scale { x, c } => {
            if wants(x, produced) {
                route(x, g.iter().map(|gi| c * gi).collect(), produced, scratch);
            }
        }
        Op::Sum { x } => {
            if wants(x, produced) {
                route(x, vec![g[0]; x.numel()], produced, scratch);
            }
        }
        Op::Mean { x } => {
            if wants(x, produced) {
                let n = x.numel() as f64;
                route(x, vec![g[0] / n; x.numel()], produced, scratch);
            }
        }
        Op::RowNorm { x } => {
            if wants(x, produced) {
                let sx = x.shape();
                let (n, f) = (sx[0], sx[1]);
                let xv = x.values();
                let ov = out.values();
                let mut dx = vec![0.0; n * f];
                for i in 0..n {
                    if ov[i] == 0.0 {
                        continue;
                    }
                    let c = g[i] / ov[i];
                    for j in 0..f {
                        dx[i * f + j] = c * xv[i * f + j];
                    }
                }
                drop(xv);
                drop(ov);
                route(x, dx, produced, scratch);
            }
        }
        Op::BatchNormTrain {
            x,
            gamma,
            beta,
            x_hat,
            inv_std,
        } => {
            let sx = x.shape();
            let (n, f) = (sx[0], sx[1]);
            if wants(x, produced) {
                let gv = gamma.values();
                let mut dx = vec![0.0; n * f];
                for j in 0..f {
                    let mut sum_dh = 0.0;
                    let mut sum_dh_h = 0.0;
                    for i in 0..n {
                        let dh = g[i * f + j] * gv[j];
                        sum_dh += dh;
                        sum_dh_h += dh * x_hat[i * f + j];
                    }
                    let inv_n = 1.0 / n as f64;
                    for i in 0..n {
                        let dh = g[i * f + j] * gv[j];
                        dx[i * f + j] = inv_std[j]
                            * (dh - inv_n * sum_dh - x_hat[i * f + j] * inv_n * sum_dh_h);
                    }
                }
                drop(gv);
                route(x, dx, produced, scratch);
            }
            bn_affine_grads(gamma, beta, x_hat, g, n, f, produced, scratch);
        }
        Op::BatchNormEval {
            x,
            gamma,
            beta,
            x_hat,
            inv_std,
        } => {
            let sx = x.shape();
            let (n, f) = (sx[0], sx[1]);
            if wants(x, produced) {
                let gv = gamma.values();
                let mut dx = vec![0.0; n * f];
                for i in 0..n {
                    for j in 0..f {
                        dx[i * f + j] = g[i * f + j] * gv[j] * inv_std[j];
                    }
                }
                drop(gv);
                route(x, dx, produced, scratch);
            }
            bn_affine_grads(gamma, beta, x_hat, g, n, f, produced, scratch);
        }
        Op::Dropout { x, mask } => {
            if wants(x, produced) {
                let dx = mask.iter().zip(g).map(|(&m, &gi)| m * gi).collect();
                route(x, dx, produced, scratch);
            }
        }
        Op::BceWithLogits {
            scores,
            targets,
            rows,
        } => {
            if wants(scores, produced) {
                let c = g[0] / (*rows).max(1) as f64;
                let ds = scores
                    .values()
                    .iter()
                    .zip(targets)
                    .map(|(&s, &t)| c * (sigmoid(s) - t))
                    .collect();
                route(scores, ds, produced, scratch);
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn bn_affine_grads(
    gamma: &Tensor,
    beta: &Tensor,
    x_hat: &[f64],
    g: &[f64],
    n: usize,
    f: usize,
    produced: &HashMap<usize, usize>,
    scratch: &mut [Option<Vec<f64>>],
) {
    if wants(gamma, produced) {
        let mut dg = vec![0.0; f];
        for i in 0..n {
            for j in 0..f {
                dg[j] += g[i * f + j] * x_hat[i * f + j];
            }
        }
        route(gamma, dg, produced, scratch);
    }
    if wants(beta, produced) {
        let mut db = vec![0.0; f];
        for i in 0..n {
            for j in 0..f {
                db[j] += g[i * f + j];
            }
        }
        route(beta, db, produced, scratch);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn elementwise_forward_values() {
        let mut tape = Tape::new();
        let x = Tensor::new(&[2], vec![-1.0, 2.0]).unwrap();
        let y = tape.leaky_relu(&x, 0.01);
        assert_eq!(y.to_vec(), vec![-0.01, 2.0]);

        let a = Tensor::new(&[2], vec![1.0, 0.0]).unwrap();
        let b = Tensor::new(&[2], vec![0.0, 2.0]).unwrap();
        let m = tape.max(&a, &b).unwrap();
        assert_eq!(m.to_vec(), vec![1.0, 2.0]);
    }

    #[test]
    fn sigmoid_gradient_at_zero() {
        let mut tape = Tape::new();
        let x = Tensor::param(&[1], vec![0.0]).unwrap();
        let y = tape.sigmoid(&x);
        let loss = tape.sum(&y);
        tape.backward(&loss).unwrap();
        let g = x.grad().unwrap();
        assert!((g[0] - 0.25).abs() < 1e-12);
    }

    #[test]
    fn sum_of_squares_gradient() {
        let mut tape = Tape::new();
        let x = Tensor::param(&[2], vec![1.0, 2.0]).unwrap();
        let sq = tape.mul(&x, &x).unwrap();
        let loss = tape.sum(&sq);
        tape.backward(&loss).unwrap();
        assert_eq!(x.grad().unwrap(), vec![2.0, 4.0]);
    }

    #[test]
    fn mse_of_identical_tensors_has_zero_gradient() {
        let mut tape = Tape::new();
        let x = Tensor::param(&[2, 2], vec![0.5, -1.0, 2.0, 0.0]).unwrap();
        let d = tape.sub(&x, &x).unwrap();
        let sq = tape.square(&d);
        let loss = tape.mean(&sq);
        tape.backward(&loss).unwrap();
        assert_eq!(x.grad().unwrap(), vec![0.0; 4]);
    }

    #[test]
    fn backward_accumulates_across_calls() {
        let mut tape = Tape::new();
        let x = Tensor::param(&[2], vec![3.0, -1.0]).unwrap();
        let y = tape.scale(&x, 2.0);
        let loss = tape.sum(&y);
        tape.backward(&loss).unwrap();
        tape.backward(&loss).unwrap();
        assert_eq!(x.grad().unwrap(), vec![4.0, 4.0]);
    }

    #[test]
    fn backward_rejects_non_scalar_and_foreign_loss() {
        let mut tape = Tape::new();
        let x = Tensor::param(&[2], vec![1.0, 2.0]).unwrap();
        let y = tape.scale(&x, 1.0);
        assert!(matches!(tape.backward(&y), Err(Error::NotScalar { .. })));
        let stray = Tensor::scalar(1.0);
        assert!(matches!(tape.backward(&stray), Err(Error::LossNotOnTape)));
    }

    #[test]
    fn matmul_shape_error_names_op() {
        let mut tape = Tape::new();
        let a = Tensor::new(&[2, 3], vec![0.0; 6]).unwrap();
        let b = Tensor::new(&[2, 3], vec![0.0; 6]).unwrap();
        let err = tape.matmul(&a, &b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("matmul"), "{msg}");
        assert!(msg.contains("[2, 3]"), "{msg}");
    }

    #[test]
    fn matmul_matches_hand_result() {
        let mut tape = Tape::new();
        let a = Tensor::new(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = Tensor::new(&[2, 2], vec![5.0, 6.0, 7.0, 8.0]).unwrap();
        let c = tape.matmul(&a, &b).unwrap();
        assert_eq!(c.to_vec(), vec![19.0, 22.0, 43.0, 50.0]);

        // a @ b^T against the same operands laid out transposed.
        let bt = Tensor::new(&[2, 2], vec![5.0, 7.0, 6.0, 8.0]).unwrap();
        let c2 = tape.matmul_tb(&a, &bt).unwrap();
        assert_eq!(c2.to_vec(), c.to_vec());
    }

    #[test]
    fn batch_norm_train_normalizes_columns() {
        let mut tape = Tape::new();
        let mut rng = StdRng::seed_from_u64(5);
        let n = 64;
        let f = 3;
        let vals: Vec<f64> = (0..n * f)
            .map(|_| rng.random::<f64>() * 4.0 - 2.0)
            .collect();
        let x = Tensor::new(&[n, f], vals).unwrap();
        let gamma = Tensor::new(&[f], vec![1.0; f]).unwrap();
        let beta = Tensor::new(&[f], vec![0.0; f]).unwrap();
        let mut stats = RunningStats::new(f);
        let y = tape
            .batch_norm_train(&x, &gamma, &beta, &mut stats, true)
            .unwrap();
        let yv = y.to_vec();
        for j in 0..f {
            let col: Vec<f64> = (0..n).map(|i| yv[i * f + j]).collect();
            let mean: f64 = col.iter().sum::<f64>() / n as f64;
            let var: f64 = col.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            assert!(mean.abs() < 1e-5, "column {j} mean {mean}");
            assert!((var - 1.0).abs() < 1e-5, "column {j} var {var}");
        }
        // Running stats moved toward the batch statistics.
        assert!(stats.mean.iter().any(|&m| m != 0.0));
    }

    #[test]
    fn batch_norm_eval_is_affine_and_deterministic() {
        let mut stats = RunningStats::new(2);
        stats.mean = vec![1.0, -1.0];
        stats.var = vec![4.0, 0.25];
        let x = Tensor::new(&[1, 2], vec![3.0, 0.0]).unwrap();
        let gamma = Tensor::new(&[2], vec![2.0, 1.0]).unwrap();
        let beta = Tensor::new(&[2], vec![0.5, 0.0]).unwrap();
        let mut tape = Tape::new();
        let y1 = tape.batch_norm_eval(&x, &gamma, &beta, &stats).unwrap();
        let y2 = tape.batch_norm_eval(&x, &gamma, &beta, &stats).unwrap();
        assert_eq!(y1.to_vec(), y2.to_vec());
        // (3-1)/sqrt(4+eps)*2+0.5 ~ 2.5, (0+1)/sqrt(.25+eps)*1 ~ 2.0
        assert!((y1.to_vec()[0] - 2.5).abs() < 1e-4);
        assert!((y1.to_vec()[1] - 2.0).abs() < 1e-4);
    }

    #[test]
    fn dropout_eval_identity_train_scaling() {
        let mut rng = StdRng::seed_from_u64(11);
        let x = Tensor::new(&[1, 1000], vec![1.0; 1000]).unwrap();
        let mut tape = Tape::new();
        let rate = 0.3;
        let y = tape.dropout(&x, rate, &mut rng).unwrap();
        let yv = y.to_vec();
        let keep = 1.0 - rate;
        for v in &yv {
            assert!(*v == 0.0 || (*v - 1.0 / keep).abs() < 1e-12);
        }
        let survived = yv.iter().filter(|v| **v != 0.0).count() as f64;
        assert!((survived / 1000.0 - keep).abs() < 0.05);
        // Expectation preserved by the inverted scaling.
        let mean: f64 = yv.iter().sum::<f64>() / 1000.0;
        assert!((mean - 1.0).abs() < 0.1);
    }

    #[test]
    fn bce_hand_values() {
        let mut tape = Tape::new();
        let s = Tensor::new(&[2], vec![0.0, 0.0]).unwrap();
        let l = vec![1.0, 0.0];
        let loss = tape.bce_with_logits(&s, &l).unwrap();
        assert!((loss.item() - 2.0 * std::f64::consts::LN_2).abs() < 1e-12);

        let s = Tensor::new(&[1], vec![10.0]).unwrap();
        let loss = tape.bce_with_logits(&s, &[1.0]).unwrap();
        assert!((loss.item() - 4.5398899216870535e-5).abs() < 1e-12);

        let s = Tensor::new(&[1], vec![0.0]).unwrap();
        let loss = tape.bce_with_logits(&s, &[0.5]).unwrap();
        assert!((loss.item() - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn bce_decreases_as_positive_score_grows() {
        let mut prev = f64::INFINITY;
        for s in [-5.0, -1.0, 0.0, 1.0, 5.0, 20.0, 200.0] {
            let mut tape = Tape::new();
            let t = Tensor::new(&[1], vec![s]).unwrap();
            let loss = tape.bce_with_logits(&t, &[1.0]).unwrap().item();
            assert!(loss >= 0.0);
            assert!(loss.is_finite());
            assert!(loss < prev, "bce not decreasing at s={s}");
            prev = loss;
        }
    }

    #[test]
    fn bce_rejects_bad_targets() {
        let mut tape = Tape::new();
        let s = Tensor::new(&[2], vec![0.0, 0.0]).unwrap();
        assert!(tape.bce_with_logits(&s, &[1.0]).is_err());
        assert!(tape.bce_with_logits(&s, &[1.0, 1.5]).is_err());
    }

    #[test]
    fn concat_and_row_norm_shapes() {
        let mut tape = Tape::new();
        let a = Tensor::new(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = Tensor::new(&[2, 1], vec![5.0, 6.0]).unwrap();
        let c = tape.concat_lastdim(&a, &b).unwrap();
        assert_eq!(c.shape(), vec![2, 3]);
        assert_eq!(c.to_vec(), vec![1.0, 2.0, 5.0, 3.0, 4.0, 6.0]);

        let x = Tensor::new(&[2, 2], vec![3.0, 4.0, 0.0, 0.0]).unwrap();
        let n = tape.row_norm(&x).unwrap();
        assert_eq!(n.to_vec(), vec![5.0, 0.0]);
    }

    #[test]
    fn shared_input_used_twice_gets_both_contributions() {
        // loss = sum(x * x) via two separate consumers of the same leaf.
        let mut tape = Tape::new();
        let x = Tensor::param(&[2], vec![1.0, -2.0]).unwrap();
        let y1 = tape.scale(&x, 3.0);
        let y2 = tape.scale(&x, -1.0);
        let s = tape.add(&y1, &y2).unwrap();
        let loss = tape.sum(&s);
        tape.backward(&loss).unwrap();
        assert_eq!(x.grad().unwrap(), vec![2.0, 2.0]);
    }
}
