//! The training objective: multi-label classification losses for the linear
//! classifier, the operator-output classification loss (through a frozen
//! classifier), and the symmetry / reconstruction regularizers.

use rand::rngs::StdRng;

use crate::autodiff::{Tape, Tensor};
use crate::labels;
use crate::nets::{LasoModel, LinearClassifier};
use crate::synth::FeatureBank;
use crate::{Error, Result};
use serde::{Deserialize, Serialize};
use std::rc::Rc;

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub laso: f64,
    pub sym: f64,
    pub mc: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            laso: 1.0,
            sym: 1.0,
            mc: 1.0,
        }
    }
}

/// Sum of the two direct classification losses; the only loss that trains
/// the classifier.
pub fn classifier_loss(
    tape: &mut Tape,
    classifier: &LinearClassifier,
    fx: &Tensor,
    fy: &Tensor,
    t_x: &[f64],
    t_y: &[f64],
) -> Result<Tensor> {
    let sx = classifier.scores(tape, fx)?;
    let sy = classifier.scores(tape, fy)?;
    let bx = tape.bce_with_logits(&sx, t_x)?;
    let by = tape.bce_with_logits(&sy, t_y)?;
    tape.add(&bx, &by)
}

/// All operator outputs needed by one optimization step. Both argument
/// orders are evaluated so the symmetry penalty and the Y-side
/// reconstruction reuse the same dropout realizations.
pub struct OperatorForwards {
    pub z_int: Tensor,
    pub z_uni: Tensor,
    pub z_sub: Tensor,
    pub z_int_swap: Tensor,
    pub z_uni_swap: Tensor,
    pub z_sub_swap: Tensor,
    /// M_uni(z_sub, z_int), trained to reconstruct F_X.
    pub z_rec_x: Tensor,
    /// M_uni(z_sub_swap, z_int), trained to reconstruct F_Y.
    pub z_rec_y: Tensor,
}

pub struct StepMasks {
    int: Vec<Option<Rc<Vec<f64>>>>,
    uni: Vec<Option<Rc<Vec<f64>>>>,
    sub: Vec<Option<Rc<Vec<f64>>>>,
}

impl StepMasks {
    pub fn draw(model: &LasoModel, batch: usize, rng: &mut StdRng) -> Self {
        StepMasks {
            int: model.m_int.draw_masks(batch, rng),
            uni: model.m_uni.draw_masks(batch, rng),
            sub: model.m_sub.draw_masks(batch, rng),
        }
    }
}

pub fn operator_forwards_train(
    model: &mut LasoModel,
    tape: &mut Tape,
    fx: &Tensor,
    fy: &Tensor,
    masks: &StepMasks,
) -> Result<OperatorForwards> {
    let z_int = model.m_int.forward_train(tape, fx, fy, &masks.int, true)?;
    let z_uni = model.m_uni.forward_train(tape, fx, fy, &masks.uni, true)?;
    let z_sub = model.m_sub.forward_train(tape, fx, fy, &masks.sub, true)?;
    let z_int_swap = model.m_int.forward_train(tape, fy, fx, &masks.int, false)?;
    let z_uni_swap = model.m_uni.forward_train(tape, fy, fx, &masks.uni, false)?;
    let z_sub_swap = model.m_sub.forward_train(tape, fy, fx, &masks.sub, false)?;
    let z_rec_x = model
        .m_uni
        .forward_train(tape, &z_sub, &z_int, &masks.uni, false)?;
    let z_rec_y = model
        .m_uni
        .forward_train(tape, &z_sub_swap, &z_int, &masks.uni, false)?;
    Ok(OperatorForwards {
        z_int,
        z_uni,
        z_sub,
        z_int_swap,
        z_uni_swap,
        z_sub_swap,
        z_rec_x,
        z_rec_y,
    })
}

/// Classification loss on the three operator outputs against the exact
/// label-set algebra. Scores go through a frozen copy of the classifier, so
/// this term shapes the operators only.
pub fn laso_loss(
    tape: &mut Tape,
    classifier: &LinearClassifier,
    fwd: &OperatorForwards,
    t_int: &[f64],
    t_uni: &[f64],
    t_sub: &[f64],
) -> Result<Tensor> {
    let s_int = classifier.scores_frozen(tape, &fwd.z_int)?;
    let s_uni = classifier.scores_frozen(tape, &fwd.z_uni)?;
    let s_sub = classifier.scores_frozen(tape, &fwd.z_sub)?;
    let b_int = tape.bce_with_logits(&s_int, t_int)?;
    let b_uni = tape.bce_with_logits(&s_uni, t_uni)?;
    let b_sub = tape.bce_with_logits(&s_sub, t_sub)?;
    let partial = tape.add(&b_int, &b_uni)?;
    tape.add(&partial, &b_sub)
}

/// Argument-order penalty on the two commutative operators: the batch mean
/// of ||z - z_swap|| / d per sample (or the squared norm when `square`).
pub fn sym_loss(tape: &mut Tape, fwd: &OperatorForwards, d: usize, square: bool) -> Result<Tensor> {
    let term = |tape: &mut Tape, a: &Tensor, b: &Tensor| -> Result<Tensor> {
        let diff = tape.sub(a, b)?;
        let mut norms = tape.row_norm(&diff)?;
        if square {
            norms = tape.square(&norms);
        }
        let scaled = tape.scale(&norms, 1.0 / d as f64);
        Ok(tape.mean(&scaled))
    };
    let s_int = term(tape, &fwd.z_int, &fwd.z_int_swap)?;
    let s_uni = term(tape, &fwd.z_uni, &fwd.z_uni_swap)?;
    tape.add(&s_int, &s_uni)
}

/// Reconstruction penalty: rebuilding each input from its pair's subtraction
/// and intersection outputs, as batch-mean squared error per coordinate.
pub fn mc_loss(
    tape: &mut Tape,
    fwd: &OperatorForwards,
    fx: &Tensor,
    fy: &Tensor,
) -> Result<Tensor> {
    let dx = tape.sub(fx, &fwd.z_rec_x)?;
    let dy = tape.sub(fy, &fwd.z_rec_y)?;
    let sx = tape.square(&dx);
    let sy = tape.square(&dy);
    let mx = tape.mean(&sx);
    let my = tape.mean(&sy);
    tape.add(&mx, &my)
}

/// Weighted sum of the operator-phase terms. Zero-weight terms are left out
/// of the graph entirely.
pub fn total_operator_loss(
    tape: &mut Tape,
    laso: &Tensor,
    sym: &Tensor,
    mc: &Tensor,
    w: &LossWeights,
) -> Result<Tensor> {
    let mut total: Option<Tensor> = None;
    for (weight, term) in [(w.laso, laso), (w.sym, sym), (w.mc, mc)] {
        if weight == 0.0 {
            continue;
        }
        let scaled = if weight == 1.0 {
            term.clone()
        } else {
            tape.scale(term, weight)
        };
        total = Some(match total {
            None => scaled,
            Some(acc) => tape.add(&acc, &scaled)?,
        });
    }
    total.ok_or(Error::InvalidConfig {
        msg: "all loss weights are zero".into(),
    })
}

/// Feature rows and all five label targets for a batch of sample pairs.
pub struct PairBatch {
    pub rows: usize,
    pub fx: Tensor,
    pub fy: Tensor,
    pub t_x: Vec<f64>,
    pub t_y: Vec<f64>,
    pub t_int: Vec<f64>,
    pub t_uni: Vec<f64>,
    pub t_sub: Vec<f64>,
}

/// One training pair. Besides plain sample pairs, a pair can overlay a third
/// sample onto both sides at (independently scaled) amplitudes; features are
/// additive in the label prototypes, so the overlaid pair still has exact
/// label targets. Such pairs exercise the relational core of the set
/// operations (keep what both sides carry, drop what one side carries) on
/// content far off the plain-pair distribution.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PairSource {
    Pair(usize, usize),
    SharedOverlay {
        x: usize,
        y: usize,
        shared: usize,
        alpha_x: f64,
        alpha_y: f64,
    },
}

pub fn build_pair_batch(bank: &FeatureBank, pairs: &[(usize, usize)]) -> Result<PairBatch> {
    let sources: Vec<PairSource> = pairs.iter().map(|&(i, j)| PairSource::Pair(i, j)).collect();
    build_mixed_batch(bank, &sources)
}

pub fn build_mixed_batch(bank: &FeatureBank, pairs: &[PairSource]) -> Result<PairBatch> {
    let rows = pairs.len();
    if rows == 0 {
        return Err(Error::EmptyPool { what: "pair batch" });
    }
    let (d, l) = (bank.d, bank.l);
    let check = |i: usize| {
        let n = bank.n();
        if i >= n {
            Err(Error::SampleOutOfRange { id: i, len: n })
        } else {
            Ok(())
        }
    };
    let mut fx = Vec::with_capacity(rows * d);
    let mut fy = Vec::with_capacity(rows * d);
    let mut t_x = Vec::with_capacity(rows * l);
    let mut t_y = Vec::with_capacity(rows * l);
    let mut t_int = Vec::with_capacity(rows * l);
    let mut t_uni = Vec::with_capacity(rows * l);
    let mut t_sub = Vec::with_capacity(rows * l);
    for &src in pairs {
        let (lx, ly) = match src {
            PairSource::Pair(i, j) => {
                check(i)?;
                check(j)?;
                fx.extend_from_slice(bank.feature(i));
                fy.extend_from_slice(bank.feature(j));
                (bank.label_vec(i), bank.label_vec(j))
            }
            PairSource::SharedOverlay {
                x,
                y,
                shared,
                alpha_x,
                alpha_y,
            } => {
                check(x)?;
                check(y)?;
                check(shared)?;
                let fw = bank.feature(shared);
                let overlay = |base: &[f64], alpha: f64, out: &mut Vec<f64>| {
                    out.extend(base.iter().zip(fw).map(|(b, w)| b + alpha * w))
                };
                overlay(bank.feature(x), alpha_x, &mut fx);
                overlay(bank.feature(y), alpha_y, &mut fy);
                let lw = bank.label_vec(shared);
                (
                    labels::set_union(&bank.label_vec(x), &lw)?,
                    labels::set_union(&bank.label_vec(y), &lw)?,
                )
            }
        };
        t_x.extend(lx.as_f64());
        t_y.extend(ly.as_f64());
        t_int.extend(labels::set_intersection(&lx, &ly)?.as_f64());
        t_uni.extend(labels::set_union(&lx, &ly)?.as_f64());
        t_sub.extend(labels::set_subtraction(&lx, &ly)?.as_f64());
    }
    Ok(PairBatch {
        rows,
        fx: Tensor::new(&[rows, d], fx)?,
        fy: Tensor::new(&[rows, d], fy)?,
        t_x,
        t_y,
        t_int,
        t_uni,
        t_sub,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate_bank, GeneratorSpec};

    fn const_forwards(rows: usize, d: usize, fill: impl Fn(&str) -> Vec<f64>) -> OperatorForwards {
        let t = |name: &str| Tensor::new(&[rows, d], fill(name)).unwrap();
        OperatorForwards {
            z_int: t("z_int"),
            z_uni: t("z_uni"),
            z_sub: t("z_sub"),
            z_int_swap: t("z_int_swap"),
            z_uni_swap: t("z_uni_swap"),
            z_sub_swap: t("z_sub_swap"),
            z_rec_x: t("z_rec_x"),
            z_rec_y: t("z_rec_y"),
        }
    }

    #[test]
    fn zero_classifier_loss_is_two_l_ln2() {
        let l = 5;
        let clf = LinearClassifier::from_values(3, l, vec![0.0; l * 3], vec![0.0; l]).unwrap();
        let mut tape = Tape::new();
        let fx = Tensor::new(&[2, 3], vec![0.7; 6]).unwrap();
        let fy = Tensor::new(&[2, 3], vec![0.1; 6]).unwrap();
        let t = vec![1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0, 1.0, 1.0, 0.0];
        let loss = classifier_loss(&mut tape, &clf, &fx, &fy, &t, &t).unwrap();
        let want = 2.0 * l as f64 * std::f64::consts::LN_2;
        assert!((loss.item() - want).abs() < 1e-12);
    }

    #[test]
    fn sym_loss_hand_values() {
        let fwd = const_forwards(1, 4, |name| match name {
            "z_int" => vec![3.0, 4.0, 0.0, 0.0],
            _ => vec![0.0; 4],
        });
        let mut tape = Tape::new();
        // ||(3,4,0,0)||/4 = 1.25 for the intersection pair, 0 for union.
        let plain = sym_loss(&mut tape, &fwd, 4, false).unwrap();
        assert!((plain.item() - 1.25).abs() < 1e-12);
        let squared = sym_loss(&mut tape, &fwd, 4, true).unwrap();
        assert!((squared.item() - 6.25).abs() < 1e-12);

        let same = const_forwards(3, 4, |_| vec![0.25; 12]);
        let zero = sym_loss(&mut tape, &same, 4, false).unwrap();
        assert_eq!(zero.item(), 0.0);
    }

    #[test]
    fn mc_loss_hand_value() {
        let fwd = const_forwards(2, 4, |name| match name {
            "z_rec_x" => vec![0.5; 8],
            "z_rec_y" => vec![1.0; 8],
            _ => vec![0.0; 8],
        });
        let mut tape = Tape::new();
        let fx = Tensor::new(&[2, 4], vec![1.0; 8]).unwrap();
        let fy = Tensor::new(&[2, 4], vec![1.0; 8]).unwrap();
        // X side: mean (0.5)^2 = 0.25; Y side reconstructs exactly.
        let loss = mc_loss(&mut tape, &fwd, &fx, &fy).unwrap();
        assert!((loss.item() - 0.25).abs() < 1e-12);
    }

    #[test]
    fn laso_loss_never_reaches_classifier_parameters() {
        let mut rng = rand::SeedableRng::seed_from_u64(3);
        let clf = LinearClassifier::new(4, 3, &mut rng);
        let mk = |v: f64| Tensor::param(&[2, 4], vec![v; 8]).unwrap();
        let fwd = OperatorForwards {
            z_int: mk(0.3),
            z_uni: mk(0.6),
            z_sub: mk(0.1),
            z_int_swap: mk(0.3),
            z_uni_swap: mk(0.6),
            z_sub_swap: mk(0.1),
            z_rec_x: mk(0.5),
            z_rec_y: mk(0.5),
        };
        let t = vec![1.0, 0.0, 1.0, 0.0, 1.0, 0.0];
        let mut tape = Tape::new();
        let loss = laso_loss(&mut tape, &clf, &fwd, &t, &t, &t).unwrap();
        tape.backward(&loss).unwrap();
        assert!(fwd.z_int.grad().is_some());
        assert!(fwd.z_uni.grad().is_some());
        assert!(fwd.z_sub.grad().is_some());
        assert!(clf.weight.grad().is_none(), "classifier got a gradient");
        assert!(clf.bias.grad().is_none());
    }

    #[test]
    fn total_loss_weights_terms_and_skips_zeros() {
        let mut tape = Tape::new();
        let laso = Tensor::param(&[], vec![2.0]).unwrap();
        let sym = Tensor::param(&[], vec![3.0]).unwrap();
        let mc = Tensor::param(&[], vec![5.0]).unwrap();
        let w = LossWeights {
            laso: 1.0,
            sym: 0.0,
            mc: 0.5,
        };
        let total = total_operator_loss(&mut tape, &laso, &sym, &mc, &w).unwrap();
        assert!((total.item() - 4.5).abs() < 1e-12);
        tape.backward(&total).unwrap();
        assert!(laso.grad().is_some());
        assert!(sym.grad().is_none(), "zero-weight term stayed in the graph");
        assert!(mc.grad().is_some());

        let none = LossWeights {
            laso: 0.0,
            sym: 0.0,
            mc: 0.0,
        };
        assert!(total_operator_loss(&mut tape, &laso, &sym, &mc, &none).is_err());
    }

    #[test]
    fn pair_batches_carry_exact_set_targets() {
        let spec = GeneratorSpec::clean_disjoint(12, 4, 3);
        let bank = generate_bank(&spec, 20, 6).unwrap();
        let pairs = [(0, 1), (2, 2), (19, 5)];
        let b = build_pair_batch(&bank, &pairs).unwrap();
        assert_eq!(b.rows, 3);
        assert_eq!(b.fx.shape(), vec![3, 12]);
        for (r, &(i, j)) in pairs.iter().enumerate() {
            let lx = bank.label_vec(i);
            let ly = bank.label_vec(j);
            let uni = labels::set_union(&lx, &ly).unwrap();
            let int = labels::set_intersection(&lx, &ly).unwrap();
            let sub = labels::set_subtraction(&lx, &ly).unwrap();
            assert_eq!(&b.t_uni[r * 4..(r + 1) * 4], &uni.as_f64()[..]);
            assert_eq!(&b.t_int[r * 4..(r + 1) * 4], &int.as_f64()[..]);
            assert_eq!(&b.t_sub[r * 4..(r + 1) * 4], &sub.as_f64()[..]);
        }
        // Self-pair: union == intersection == own labels, subtraction empty.
        assert_eq!(&b.t_sub[4..8], &[0.0; 4]);
        assert!(build_pair_batch(&bank, &[(0, 99)]).is_err());
        assert!(build_pair_batch(&bank, &[]).is_err());
    }

    #[test]
    fn shared_overlay_rows_mix_features_and_union_labels() {
        let spec = GeneratorSpec::clean_disjoint(12, 4, 3);
        let bank = generate_bank(&spec, 20, 6).unwrap();
        let src = PairSource::SharedOverlay {
            x: 0,
            y: 1,
            shared: 2,
            alpha_x: 0.5,
            alpha_y: 1.0,
        };
        let b = build_mixed_batch(&bank, &[src]).unwrap();
        let (f0, f1, f2) = (bank.feature(0), bank.feature(1), bank.feature(2));
        for j in 0..12 {
            assert!((b.fx.values()[j] - (f0[j] + 0.5 * f2[j])).abs() < 1e-12);
            assert!((b.fy.values()[j] - (f1[j] + f2[j])).abs() < 1e-12);
        }
        let lw = bank.label_vec(2);
        let lx = labels::set_union(&bank.label_vec(0), &lw).unwrap();
        let ly = labels::set_union(&bank.label_vec(1), &lw).unwrap();
        assert_eq!(b.t_x, lx.as_f64());
        assert_eq!(b.t_y, ly.as_f64());
        assert_eq!(
            b.t_int,
            labels::set_intersection(&lx, &ly).unwrap().as_f64()
        );
        assert_eq!(b.t_uni, labels::set_union(&lx, &ly).unwrap().as_f64());
        assert_eq!(
            b.t_sub,
            labels::set_subtraction(&lx, &ly).unwrap().as_f64()
        );
        // The shared sample's labels sit on both sides: never in t_sub.
        for (k, &w) in lw.as_f64().iter().enumerate() {
            if w == 1.0 {
                assert_eq!(b.t_int[k], 1.0);
                assert_eq!(b.t_sub[k], 0.0);
            }
        }
    }

    #[test]
    fn operator_forwards_share_masks_between_orders() {
        // With all-equal inputs the swap forwards see identical tensors, so
        // shared dropout realizations force exactly equal outputs.
        let mut model = LasoModel::new(6, 3, 3, 0.4, 0.01, 21).unwrap();
        let mut rng = rand::SeedableRng::seed_from_u64(8);
        let rows = 5;
        let fx = Tensor::new(&[rows, 6], vec![0.8; rows * 6]).unwrap();
        let fy = Tensor::new(&[rows, 6], vec![0.8; rows * 6]).unwrap();
        let masks = StepMasks::draw(&model, rows, &mut rng);
        let mut tape = Tape::new();
        let fwd = operator_forwards_train(&mut model, &mut tape, &fx, &fy, &masks).unwrap();
        assert_eq!(fwd.z_int.to_vec(), fwd.z_int_swap.to_vec());
        assert_eq!(fwd.z_uni.to_vec(), fwd.z_uni_swap.to_vec());
        assert_eq!(fwd.z_sub.to_vec(), fwd.z_sub_swap.to_vec());
        assert_eq!(fwd.z_rec_x.to_vec(), fwd.z_rec_y.to_vec());
    }
}
