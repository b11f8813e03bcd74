//! Runtime finite-difference verification of the whole differentiation
//! surface: every tape primitive, every loss, and randomly composed graphs.
//!
//! Each check rebuilds its objective as a pure forward function and probes
//! it with central differences, comparing against one reverse-mode pass.
//! Inputs for kinked ops (max, min, relu) are sampled with a margin around
//! the kink so the two-sided probe stays on one branch. Large parameter
//! sets are probed at a random coordinate subset per instance; the reverse
//! pass is always full.

use std::rc::Rc;

use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};
use rand_distr::{Distribution, Normal};

use crate::autodiff::gradcheck::rel_err;
use crate::autodiff::{dropout_mask, RunningStats, Tape, Tensor};
use crate::losses::{self, LossWeights, StepMasks};
use crate::nets::{LasoModel, LinearClassifier};
use crate::Result;

const H: f64 = 1e-5;
const TOLERANCE: f64 = 1e-4;
/// Margin kept between kinked-op inputs and their kink.
const KINK_MARGIN: f64 = 0.1;
/// FD probe budget per instance for large parameter sets.
const MAX_PROBES: usize = 48;

#[derive(Debug, Clone)]
pub struct CheckReport {
    pub name: &'static str,
    pub instances: usize,
    pub max_rel_err: f64,
    pub tolerance: f64,
}

impl CheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err < self.tolerance
    }
}

#[derive(Debug, Clone)]
pub struct SuiteReport {
    pub checks: Vec<CheckReport>,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(CheckReport::passed)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for c in &self.checks {
            out.push_str(&format!(
                "{:<24} instances={:<4} max_rel_err={:.3e}  {}\n",
                c.name,
                c.instances,
                c.max_rel_err,
                if c.passed() { "ok" } else { "FAIL" }
            ));
        }
        let worst = self
            .checks
            .iter()
            .map(|c| c.max_rel_err)
            .fold(0.0, f64::max);
        out.push_str(&format!(
            "{} checks, worst {:.3e}, {}\n",
            self.checks.len(),
            worst,
            if self.passed() {
                "all passed"
            } else {
                "FAILURES present"
            }
        ));
        out
    }
}

/// One reverse pass vs central differences over (a subset of) coordinates.
/// `build` must be a pure function of the current input values.
fn fd_check<F>(inputs: &[Tensor], mut build: F, rng: &mut StdRng) -> Result<f64>
where
    F: FnMut(&mut Tape) -> Result<Tensor>,
{
    for t in inputs {
        t.zero_grad();
    }
    let mut tape = Tape::new();
    let loss = build(&mut tape)?;
    tape.backward(&loss)?;
    let analytic: Vec<Vec<f64>> = inputs
        .iter()
        .map(|t| t.grad().unwrap_or_else(|| vec![0.0; t.numel()]))
        .collect();

    let mut coords: Vec<(usize, usize)> = inputs
        .iter()
        .enumerate()
        .flat_map(|(ti, t)| (0..t.numel()).map(move |ci| (ti, ci)))
        .collect();
    if coords.len() > MAX_PROBES {
        coords = rand::seq::index::sample(rng, coords.len(), MAX_PROBES)
            .into_iter()
            .map(|i| coords[i])
            .collect();
    }

    let mut worst = 0.0f64;
    for (ti, ci) in coords {
        let base = inputs[ti].to_vec();
        let mut probe = base.clone();
        let at = |x: f64, probe: &mut Vec<f64>, build: &mut F| -> Result<f64> {
            probe[ci] = x;
            inputs[ti].set_values(probe);
            Ok(build(&mut Tape::new())?.item())
        };
        let up = at(base[ci] + H, &mut probe, &mut build)?;
        let down = at(base[ci] - H, &mut probe, &mut build)?;
        let up_half = at(base[ci] + H / 2.0, &mut probe, &mut build)?;
        let down_half = at(base[ci] - H / 2.0, &mut probe, &mut build)?;
        inputs[ti].set_values(&base);
        let fd = (up - down) / (2.0 * H);
        let fd_half = (up_half - down_half) / H;
        // Estimates from two step sizes agree on smooth stretches but not
        // across a kink hidden inside the graph (an internal activation
        // within h of zero). Skip such probes: a wrong backward pass is
        // still caught because both estimates then agree with each other
        // and disagree with the analytic gradient.
        if rel_err(fd, fd_half) > 0.5 * TOLERANCE {
            continue;
        }
        worst = worst.max(rel_err(analytic[ti][ci], fd));
    }
    Ok(worst)
}

/// Random scalar objective over a non-scalar output: sum of an elementwise
/// product with fixed weights.
fn weighted_sum(tape: &mut Tape, y: &Tensor, w: &[f64]) -> Result<Tensor> {
    let wt = Tensor::new(&y.shape(), w.to_vec())?;
    let p = tape.mul(y, &wt)?;
    Ok(tape.sum(&p))
}

fn normal_vec(n: usize, rng: &mut StdRng) -> Vec<f64> {
    let dist = Normal::new(0.0, 1.0).expect("unit normal");
    (0..n).map(|_| dist.sample(rng)).collect()
}

fn param(shape: &[usize], rng: &mut StdRng) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::param(shape, normal_vec(n, rng)).expect("shape/values agree")
}

fn dim(rng: &mut StdRng) -> usize {
    rng.random_range(1..=8)
}

fn binary_targets(n: usize, rng: &mut StdRng) -> Vec<f64> {
    (0..n).map(|_| f64::from(rng.random_range(0..=1))).collect()
}

type InstanceFn = fn(&mut StdRng) -> Result<f64>;

fn run_check(
    name: &'static str,
    instances: usize,
    f: InstanceFn,
    rng: &mut StdRng,
) -> Result<CheckReport> {
    let mut worst = 0.0f64;
    for _ in 0..instances {
        worst = worst.max(f(rng)?);
    }
    Ok(CheckReport {
        name,
        instances,
        max_rel_err: worst,
        tolerance: TOLERANCE,
    })
}

// --- primitive instances ----------------------------------------------------

fn inst_matmul(rng: &mut StdRng) -> Result<f64> {
    let (m, k, n) = (dim(rng), dim(rng), dim(rng));
    let a = param(&[m, k], rng);
    let b = param(&[k, n], rng);
    let w = normal_vec(m * n, rng);
    fd_check(
        &[a.clone(), b.clone()],
        |t| {
            let y = t.matmul(&a, &b)?;
            weighted_sum(t, &y, &w)
        },
        rng,
    )
}

fn inst_matmul_tb(rng: &mut StdRng) -> Result<f64> {
    let (m, k, n) = (dim(rng), dim(rng), dim(rng));
    let a = param(&[m, k], rng);
    let b = param(&[n, k], rng);
    let w = normal_vec(m * n, rng);
    fd_check(
        &[a.clone(), b.clone()],
        |t| {
            let y = t.matmul_tb(&a, &b)?;
            weighted_sum(t, &y, &w)
        },
        rng,
    )
}

fn inst_add_bias(rng: &mut StdRng) -> Result<f64> {
    let (m, n) = (dim(rng), dim(rng));
    let x = param(&[m, n], rng);
    let b = param(&[n], rng);
    let w = normal_vec(m * n, rng);
    fd_check(
        &[x.clone(), b.clone()],
        |t| {
            let y = t.add_bias(&x, &b)?;
            weighted_sum(t, &y, &w)
        },
        rng,
    )
}

fn inst_concat(rng: &mut StdRng) -> Result<f64> {
    let (m, p, q) = (dim(rng), dim(rng), dim(rng));
    let a = param(&[m, p], rng);
    let b = param(&[m, q], rng);
    let w = normal_vec(m * (p + q), rng);
    fd_check(
        &[a.clone(), b.clone()],
        |t| {
            let y = t.concat_lastdim(&a, &b)?;
            weighted_sum(t, &y, &w)
        },
        rng,
    )
}

fn elementwise_pair(
    rng: &mut StdRng,
    op: fn(&mut Tape, &Tensor, &Tensor) -> Result<Tensor>,
    margin: bool,
) -> Result<f64> {
    let (m, n) = (dim(rng), dim(rng));
    let a = param(&[m, n], rng);
    let b = if margin {
        // keep |a - b| >= margin coordinatewise so max/min stay one-sided
        let av = a.to_vec();
        let vals = av
            .iter()
            .map(|&x| {
                let gap = KINK_MARGIN + rng.random::<f64>();
                if rng.random::<bool>() {
                    x + gap
                } else {
                    x - gap
                }
            })
            .collect();
        Tensor::param(&[m, n], vals)?
    } else {
        param(&[m, n], rng)
    };
    let w = normal_vec(m * n, rng);
    fd_check(
        &[a.clone(), b.clone()],
        |t| {
            let y = op(t, &a, &b)?;
            weighted_sum(t, &y, &w)
        },
        rng,
    )
}

fn inst_add(rng: &mut StdRng) -> Result<f64> {
    elementwise_pair(rng, Tape::add, false)
}

fn inst_sub(rng: &mut StdRng) -> Result<f64> {
    elementwise_pair(rng, Tape::sub, false)
}

fn inst_mul(rng: &mut StdRng) -> Result<f64> {
    elementwise_pair(rng, Tape::mul, false)
}

fn inst_max(rng: &mut StdRng) -> Result<f64> {
    elementwise_pair(rng, Tape::max, true)
}

fn inst_min(rng: &mut StdRng) -> Result<f64> {
    elementwise_pair(rng, Tape::min, true)
}

/// Values bounded away from zero, where relu and leaky relu kink.
fn off_kink(shape: &[usize], rng: &mut StdRng) -> Tensor {
    let n: usize = shape.iter().product();
    let vals = (0..n)
        .map(|_| {
            let mag = KINK_MARGIN + rng.random::<f64>() * 2.0;
            if rng.random::<bool>() {
                mag
            } else {
                -mag
            }
        })
        .collect();
    Tensor::param(shape, vals).expect("shape/values agree")
}

fn inst_relu(rng: &mut StdRng) -> Result<f64> {
    let (m, n) = (dim(rng), dim(rng));
    let x = off_kink(&[m, n], rng);
    let w = normal_vec(m * n, rng);
    fd_check(
        &[x.clone()],
        |t| {
            let y = t.relu(&x);
            weighted_sum(t, &y, &w)
        },
        rng,
    )
}

fn inst_leaky_relu(rng: &mut StdRng) -> Result<f64> {
    let (m, n) = (dim(rng), dim(rng));
    let x = off_kink(&[m, n], rng);
    let slope = rng.random_range(0.01..0.3);
    let w = normal_vec(m * n, rng);
    fd_check(
        &[x.clone()],
        |t| {
            let y = t.leaky_relu(&x, slope);
            weighted_sum(t, &y, &w)
        },
        rng,
    )
}

fn inst_sigmoid(rng: &mut StdRng) -> Result<f64> {
    let (m, n) = (dim(rng), dim(rng));
    let x = param(&[m, n], rng);
    let w = normal_vec(m * n, rng);
    fd_check(
        &[x.clone()],
        |t| {
            let y = t.sigmoid(&x);
            weighted_sum(t, &y, &w)
        },
        rng,
    )
}

fn inst_log(rng: &mut StdRng) -> Result<f64> {
    let (m, n) = (dim(rng), dim(rng));
    let vals = (0..m * n).map(|_| rng.random_range(0.5..3.0)).collect();
    let x = Tensor::param(&[m, n], vals)?;
    let w = normal_vec(m * n, rng);
    fd_check(
        &[x.clone()],
        |t| {
            let y = t.log(&x)?;
            weighted_sum(t, &y, &w)
        },
        rng,
    )
}

fn inst_square(rng: &mut StdRng) -> Result<f64> {
    let (m, n) = (dim(rng), dim(rng));
    let x = param(&[m, n], rng);
    let w = normal_vec(m * n, rng);
    fd_check(
        &[x.clone()],
        |t| {
            let y = t.square(&x);
            weighted_sum(t, &y, &w)
        },
        rng,
    )
}

fn inst_scale(rng: &mut StdRng) -> Result<f64> {
    let (m, n) = (dim(rng), dim(rng));
    let x = param(&[m, n], rng);
    let c = rng.random_range(-2.0..2.0);
    let w = normal_vec(m * n, rng);
    fd_check(
        &[x.clone()],
        |t| {
            let y = t.scale(&x, c);
            weighted_sum(t, &y, &w)
        },
        rng,
    )
}

fn inst_sum(rng: &mut StdRng) -> Result<f64> {
    let (m, n) = (dim(rng), dim(rng));
    let x = param(&[m, n], rng);
    fd_check(&[x.clone()], |t| Ok(t.sum(&x)), rng)
}

fn inst_mean(rng: &mut StdRng) -> Result<f64> {
    let (m, n) = (dim(rng), dim(rng));
    let x = param(&[m, n], rng);
    fd_check(&[x.clone()], |t| Ok(t.mean(&x)), rng)
}

fn inst_row_norm(rng: &mut StdRng) -> Result<f64> {
    let (m, n) = (dim(rng), dim(rng));
    // keep each row away from the norm's kink at zero
    let mut vals = normal_vec(m * n, rng);
    for r in 0..m {
        let row = &mut vals[r * n..(r + 1) * n];
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm < 0.3 {
            for v in row.iter_mut() {
                *v += 0.5;
            }
        }
    }
    let x = Tensor::param(&[m, n], vals)?;
    let w = normal_vec(m, rng);
    fd_check(
        &[x.clone()],
        |t| {
            let y = t.row_norm(&x)?;
            weighted_sum(t, &y, &w)
        },
        rng,
    )
}

fn inst_batch_norm(rng: &mut StdRng) -> Result<f64> {
    let (m, n) = (rng.random_range(2..=6), dim(rng));
    // spread every column so the batch variance stays well conditioned
    let mut vals = normal_vec(m * n, rng);
    for c in 0..n {
        let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
        for r in 0..m {
            lo = lo.min(vals[r * n + c]);
            hi = hi.max(vals[r * n + c]);
        }
        if hi - lo < 0.2 {
            vals[c] += 0.5;
        }
    }
    let x = Tensor::param(&[m, n], vals)?;
    let gamma = Tensor::param(&[n], (0..n).map(|_| 0.5 + rng.random::<f64>()).collect())?;
    let beta = param(&[n], rng);
    let stats = RunningStats::new(n);
    let w = normal_vec(m * n, rng);
    fd_check(
        &[x.clone(), gamma.clone(), beta.clone()],
        |t| {
            let mut s = stats.clone();
            let y = t.batch_norm_train(&x, &gamma, &beta, &mut s, true)?;
            weighted_sum(t, &y, &w)
        },
        rng,
    )
}

fn inst_dropout(rng: &mut StdRng) -> Result<f64> {
    let (m, n) = (dim(rng), dim(rng));
    let x = param(&[m, n], rng);
    let mask: Rc<Vec<f64>> = dropout_mask(m * n, 0.3, rng);
    let w = normal_vec(m * n, rng);
    fd_check(
        &[x.clone()],
        |t| {
            let y = t.dropout_masked(&x, &mask)?;
            weighted_sum(t, &y, &w)
        },
        rng,
    )
}

fn inst_bce(rng: &mut StdRng) -> Result<f64> {
    let (m, n) = (dim(rng), dim(rng));
    let scores = param(&[m, n], rng);
    let targets = binary_targets(m * n, rng);
    fd_check(
        &[scores.clone()],
        |t| t.bce_with_logits(&scores, &targets),
        rng,
    )
}

// --- loss instances -----------------------------------------------------------

fn inst_classifier_loss(rng: &mut StdRng) -> Result<f64> {
    let (d, l, m) = (4, 3, rng.random_range(1..=4));
    let clf = LinearClassifier::new(d, l, rng);
    let fx = param(&[m, d], rng);
    let fy = param(&[m, d], rng);
    let t_x = binary_targets(m * l, rng);
    let t_y = binary_targets(m * l, rng);
    fd_check(
        &[clf.weight.clone(), clf.bias.clone(), fx.clone(), fy.clone()],
        |t| losses::classifier_loss(t, &clf, &fx, &fy, &t_x, &t_y),
        rng,
    )
}

/// Shared scaffolding for the operator losses: a tiny model, one pair batch,
/// and fixed dropout masks so the objective is deterministic.
struct OperatorFixture {
    model: LasoModel,
    masks: StepMasks,
    fx: Tensor,
    fy: Tensor,
    t_int: Vec<f64>,
    t_uni: Vec<f64>,
    t_sub: Vec<f64>,
    d: usize,
}

impl OperatorFixture {
    fn new(rng: &mut StdRng) -> Result<Self> {
        let (d, l, m) = (4, 3, 2);
        let model = LasoModel::new(d, l, 3, 0.3, 0.01, rng.random::<u64>())?;
        let masks = StepMasks::draw(&model, m, rng);
        Ok(OperatorFixture {
            fx: param(&[m, d], rng),
            fy: param(&[m, d], rng),
            t_int: binary_targets(m * l, rng),
            t_uni: binary_targets(m * l, rng),
            t_sub: binary_targets(m * l, rng),
            model,
            masks,
            d,
        })
    }

    fn inputs(&self) -> Vec<Tensor> {
        let mut ts: Vec<Tensor> = self
            .model
            .operator_params()
            .into_iter()
            .map(|(_, t)| t)
            .collect();
        ts.push(self.fx.clone());
        ts.push(self.fy.clone());
        ts
    }
}

fn inst_laso_loss(rng: &mut StdRng) -> Result<f64> {
    let mut fx = OperatorFixture::new(rng)?;
    let inputs = fx.inputs();
    let (a, b) = (fx.fx.clone(), fx.fy.clone());
    let (ti, tu, ts) = (fx.t_int.clone(), fx.t_uni.clone(), fx.t_sub.clone());
    fd_check(
        &inputs,
        move |t| {
            let fwd = losses::operator_forwards_train(&mut fx.model, t, &a, &b, &fx.masks)?;
            losses::laso_loss(t, &fx.model.classifier, &fwd, &ti, &tu, &ts)
        },
        rng,
    )
}

fn inst_sym_loss(rng: &mut StdRng) -> Result<f64> {
    let mut fx = OperatorFixture::new(rng)?;
    let inputs = fx.inputs();
    let (a, b) = (fx.fx.clone(), fx.fy.clone());
    let d = fx.d;
    fd_check(
        &inputs,
        move |t| {
            let fwd = losses::operator_forwards_train(&mut fx.model, t, &a, &b, &fx.masks)?;
            losses::sym_loss(t, &fwd, d, false)
        },
        rng,
    )
}

fn inst_sym_loss_squared(rng: &mut StdRng) -> Result<f64> {
    let mut fx = OperatorFixture::new(rng)?;
    let inputs = fx.inputs();
    let (a, b) = (fx.fx.clone(), fx.fy.clone());
    let d = fx.d;
    fd_check(
        &inputs,
        move |t| {
            let fwd = losses::operator_forwards_train(&mut fx.model, t, &a, &b, &fx.masks)?;
            losses::sym_loss(t, &fwd, d, true)
        },
        rng,
    )
}

fn inst_mc_loss(rng: &mut StdRng) -> Result<f64> {
    let mut fx = OperatorFixture::new(rng)?;
    let inputs = fx.inputs();
    let (a, b) = (fx.fx.clone(), fx.fy.clone());
    fd_check(
        &inputs,
        move |t| {
            let fwd = losses::operator_forwards_train(&mut fx.model, t, &a, &b, &fx.masks)?;
            losses::mc_loss(t, &fwd, &a, &b)
        },
        rng,
    )
}

fn inst_total_loss(rng: &mut StdRng) -> Result<f64> {
    let mut fx = OperatorFixture::new(rng)?;
    let inputs = fx.inputs();
    let (a, b) = (fx.fx.clone(), fx.fy.clone());
    let (ti, tu, ts) = (fx.t_int.clone(), fx.t_uni.clone(), fx.t_sub.clone());
    let d = fx.d;
    let weights = LossWeights {
        laso: 0.5 + rng.random::<f64>(),
        sym: 0.5 + rng.random::<f64>(),
        mc: 0.5 + rng.random::<f64>(),
    };
    fd_check(
        &inputs,
        move |t| {
            let fwd = losses::operator_forwards_train(&mut fx.model, t, &a, &b, &fx.masks)?;
            let laso = losses::laso_loss(t, &fx.model.classifier, &fwd, &ti, &tu, &ts)?;
            let sym = losses::sym_loss(t, &fwd, d, false)?;
            let mc = losses::mc_loss(t, &fwd, &a, &b)?;
            losses::total_operator_loss(t, &laso, &sym, &mc, &weights)
        },
        rng,
    )
}

// --- random composite graphs ----------------------------------------------------

/// A random program of up to 5 smooth ops over same-shape intermediates,
/// reduced to a scalar by a fixed random weighting. Kinked ops are covered
/// by the dedicated margin-sampled checks above.
fn inst_composite(rng: &mut StdRng) -> Result<f64> {
    #[derive(Clone, Copy)]
    enum Step {
        Add(usize),
        Sub(usize),
        Mul(usize),
        Sigmoid,
        Square,
        Scale(f64),
        MatmulLeaf(usize),
    }

    let (m, n) = (dim(rng), dim(rng));
    let n_ops = rng.random_range(1..=5);
    let mut leaves = vec![param(&[m, n], rng)];
    let mut steps = Vec::with_capacity(n_ops);
    for k in 0..n_ops {
        let pick = rng.random_range(0..7);
        let step = match pick {
            0 | 1 | 2 => {
                // binary against either a previous value or a fresh leaf
                let operand = if rng.random::<bool>() || k == 0 {
                    leaves.push(param(&[m, n], rng));
                    usize::MAX // sentinel: newest leaf
                } else {
                    rng.random_range(0..k)
                };
                match pick {
                    0 => Step::Add(operand),
                    1 => Step::Sub(operand),
                    _ => Step::Mul(operand),
                }
            }
            3 => Step::Sigmoid,
            4 => Step::Square,
            5 => Step::Scale(rng.random_range(-2.0..2.0)),
            _ => {
                leaves.push(param(&[n, n], rng));
                Step::MatmulLeaf(leaves.len() - 1)
            }
        };
        steps.push((step, leaves.len() - 1));
    }
    let w = normal_vec(m * n, rng);

    let inputs = leaves.clone();
    fd_check(
        &inputs,
        move |t| {
            let mut vals: Vec<Tensor> = vec![leaves[0].clone()];
            for &(step, newest_leaf) in &steps {
                let cur = vals.last().expect("nonempty").clone();
                let next = match step {
                    Step::Add(op) => {
                        let rhs = if op == usize::MAX {
                            &leaves[newest_leaf]
                        } else {
                            &vals[op]
                        };
                        t.add(&cur, rhs)?
                    }
                    Step::Sub(op) => {
                        let rhs = if op == usize::MAX {
                            &leaves[newest_leaf]
                        } else {
                            &vals[op]
                        };
                        t.sub(&cur, rhs)?
                    }
                    Step::Mul(op) => {
                        let rhs = if op == usize::MAX {
                            &leaves[newest_leaf]
                        } else {
                            &vals[op]
                        };
                        t.mul(&cur, rhs)?
                    }
                    Step::Sigmoid => t.sigmoid(&cur),
                    Step::Square => t.square(&cur),
                    Step::Scale(c) => t.scale(&cur, c),
                    Step::MatmulLeaf(i) => t.matmul(&cur, &leaves[i])?,
                };
                vals.push(next);
            }
            let out = vals.last().expect("nonempty");
            weighted_sum(t, out, &w)
        },
        rng,
    )
}

// --- the suite -------------------------------------------------------------------

pub fn run_suite(instances: usize, seed: u64) -> Result<SuiteReport> {
    let checks: &[(&'static str, InstanceFn)] = &[
        ("matmul", inst_matmul),
        ("matmul_tb", inst_matmul_tb),
        ("add_bias", inst_add_bias),
        ("concat_lastdim", inst_concat),
        ("add", inst_add),
        ("sub", inst_sub),
        ("mul", inst_mul),
        ("max", inst_max),
        ("min", inst_min),
        ("relu", inst_relu),
        ("leaky_relu", inst_leaky_relu),
        ("sigmoid", inst_sigmoid),
        ("log", inst_log),
        ("square", inst_square),
        ("scale", inst_scale),
        ("sum", inst_sum),
        ("mean", inst_mean),
        ("row_norm", inst_row_norm),
        ("batch_norm_train", inst_batch_norm),
        ("dropout_masked", inst_dropout),
        ("bce_with_logits", inst_bce),
        ("classifier_loss", inst_classifier_loss),
        ("laso_loss", inst_laso_loss),
        ("sym_loss", inst_sym_loss),
        ("sym_loss_squared", inst_sym_loss_squared),
        ("mc_loss", inst_mc_loss),
        ("total_operator_loss", inst_total_loss),
        ("composite_graphs", inst_composite),
    ];
    let mut rng = StdRng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(checks.len());
    for &(name, f) in checks {
        out.push(run_check(name, instances, f, &mut rng)?);
    }
    Ok(SuiteReport { checks: out })
}
