//! Exact set algebra over binary label vectors. These are the ground-truth
//! targets the operator networks are trained to realize.

use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct LabelVec {
    bits: Vec<bool>,
}

impl LabelVec {
    pub fn empty(len: usize) -> Self {
        LabelVec {
            bits: vec![false; len],
        }
    }

    pub fn from_bits(bits: Vec<bool>) -> Self {
        LabelVec { bits }
    }

    /// Builds from any 0/1 byte row (the bank's label storage).
    pub fn from_bytes(row: &[u8]) -> Self {
        LabelVec {
            bits: row.iter().map(|&b| b != 0).collect(),
        }
    }

    pub fn from_indices(len: usize, on: &[usize]) -> Self {
        let mut bits = vec![false; len];
        for &i in on {
            bits[i] = true;
        }
        LabelVec { bits }
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty_set(&self) -> bool {
        !self.bits.iter().any(|&b| b)
    }

    pub fn get(&self, i: usize) -> bool {
        self.bits[i]
    }

    pub fn set(&mut self, i: usize, on: bool) {
        self.bits[i] = on;
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn indices(&self) -> Vec<usize> {
        self.bits
            .iter()
            .enumerate()
            .filter_map(|(i, &b)| b.then_some(i))
            .collect()
    }

    pub fn as_f64(&self) -> Vec<f64> {
        self.bits
            .iter()
            .map(|&b| if b { 1.0 } else { 0.0 })
            .collect()
    }

    pub fn as_bytes(&self) -> Vec<u8> {
        self.bits.iter().map(|&b| b as u8).collect()
    }

    /// Keeps only the labels where `mask` is true.
    pub fn restrict(&self, mask: &[bool]) -> LabelVec {
        assert_eq!(mask.len(), self.len(), "restriction mask length");
        LabelVec::from_bits(self.bits.iter().zip(mask).map(|(&b, &m)| b && m).collect())
    }

    fn check(&self, other: &LabelVec, op: &'static str) -> Result<()> {
        if self.len() != other.len() {
            return Err(Error::LengthMismatch {
                op,
                lhs: self.len(),
                rhs: other.len(),
            });
        }
        Ok(())
    }
}

pub fn set_union(a: &LabelVec, b: &LabelVec) -> Result<LabelVec> {
    a.check(b, "set_union")?;
    Ok(LabelVec {
        bits: a.bits.iter().zip(&b.bits).map(|(&x, &y)| x | y).collect(),
    })
}

pub fn set_intersection(a: &LabelVec, b: &LabelVec) -> Result<LabelVec> {
    a.check(b, "set_intersection")?;
    Ok(LabelVec {
        bits: a.bits.iter().zip(&b.bits).map(|(&x, &y)| x & y).collect(),
    })
}

pub fn set_subtraction(a: &LabelVec, b: &LabelVec) -> Result<LabelVec> {
    a.check(b, "set_subtraction")?;
    Ok(LabelVec {
        bits: a.bits.iter().zip(&b.bits).map(|(&x, &y)| x & !y).collect(),
    })
}

/// |a∩b| / |a∪b|, with the empty-vs-empty case defined as 1.0 (a synthesized
/// empty vector matching an empty target is a perfect retrieval).
pub fn iou(a: &LabelVec, b: &LabelVec) -> Result<f64> {
    a.check(b, "iou")?;
    let mut inter = 0usize;
    let mut union = 0usize;
    for (&x, &y) in a.bits.iter().zip(&b.bits) {
        inter += (x & y) as usize;
        union += (x | y) as usize;
    }
    if union == 0 {
        Ok(1.0)
    } else {
        Ok(inter as f64 / union as f64)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn lv(len: usize, on: &[usize]) -> LabelVec {
        LabelVec::from_indices(len, on)
    }

    #[test]
    fn basic_ops() {
        let a = lv(4, &[1, 2]);
        let b = lv(4, &[2, 3]);
        assert_eq!(set_union(&a, &b).unwrap(), lv(4, &[1, 2, 3]));
        assert_eq!(set_intersection(&a, &b).unwrap(), lv(4, &[2]));
        assert_eq!(set_subtraction(&a, &b).unwrap(), lv(4, &[1]));
        assert!((iou(&a, &b).unwrap() - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn identities_with_empty_and_self() {
        let a = lv(5, &[0, 4]);
        let e = LabelVec::empty(5);
        assert_eq!(set_union(&a, &e).unwrap(), a);
        assert_eq!(set_intersection(&a, &e).unwrap(), e);
        assert_eq!(set_subtraction(&a, &e).unwrap(), a);
        assert_eq!(set_union(&a, &a).unwrap(), a);
        assert_eq!(set_intersection(&a, &a).unwrap(), a);
        assert_eq!(set_subtraction(&a, &a).unwrap(), e);
        assert_eq!(iou(&a, &a).unwrap(), 1.0);
        assert_eq!(iou(&e, &e).unwrap(), 1.0);
    }

    #[test]
    fn length_mismatch_is_an_error() {
        let a = lv(3, &[0]);
        let b = lv(4, &[0]);
        assert!(set_union(&a, &b).is_err());
        assert!(iou(&a, &b).is_err());
    }

    /// Oracle route: the same ops through index sets instead of bit vectors.
    fn oracle(a: &LabelVec, b: &LabelVec) -> (Vec<usize>, Vec<usize>, Vec<usize>, f64) {
        use std::collections::BTreeSet;
        let sa: BTreeSet<usize> = a.indices().into_iter().collect();
        let sb: BTreeSet<usize> = b.indices().into_iter().collect();
        let uni: Vec<usize> = sa.union(&sb).copied().collect();
        let int: Vec<usize> = sa.intersection(&sb).copied().collect();
        let sub: Vec<usize> = sa.difference(&sb).copied().collect();
        let iou = if uni.is_empty() {
            1.0
        } else {
            int.len() as f64 / uni.len() as f64
        };
        (uni, int, sub, iou)
    }

    #[test]
    fn exhaustive_against_set_enumeration_up_to_l6() {
        for l in 1..=6usize {
            for am in 0u32..(1 << l) {
                for bm in 0u32..(1 << l) {
                    let a = LabelVec::from_bits((0..l).map(|i| am >> i & 1 == 1).collect());
                    let b = LabelVec::from_bits((0..l).map(|i| bm >> i & 1 == 1).collect());
                    let (uni, int, sub, want_iou) = oracle(&a, &b);
                    assert_eq!(set_union(&a, &b).unwrap().indices(), uni);
                    assert_eq!(set_intersection(&a, &b).unwrap().indices(), int);
                    assert_eq!(set_subtraction(&a, &b).unwrap().indices(), sub);
                    assert_eq!(iou(&a, &b).unwrap(), want_iou);
                }
            }
        }
    }

    proptest! {
        #[test]
        fn algebraic_properties(am in proptest::collection::vec(any::<bool>(), 12),
                                bm in proptest::collection::vec(any::<bool>(), 12),
                                cm in proptest::collection::vec(any::<bool>(), 12)) {
            let a = LabelVec::from_bits(am);
            let b = LabelVec::from_bits(bm);
            let c = LabelVec::from_bits(cm);
            // commutativity
            prop_assert_eq!(set_union(&a, &b).unwrap(), set_union(&b, &a).unwrap());
            prop_assert_eq!(set_intersection(&a, &b).unwrap(), set_intersection(&b, &a).unwrap());
            // associativity
            let u_ab_c = set_union(&set_union(&a, &b).unwrap(), &c).unwrap();
            let u_a_bc = set_union(&a, &set_union(&b, &c).unwrap()).unwrap();
            prop_assert_eq!(u_ab_c, u_a_bc);
            let i_ab_c = set_intersection(&set_intersection(&a, &b).unwrap(), &c).unwrap();
            let i_a_bc = set_intersection(&a, &set_intersection(&b, &c).unwrap()).unwrap();
            prop_assert_eq!(i_ab_c, i_a_bc);
            // (A\B) ∪ (A∩B) = A
            let back = set_union(
                &set_subtraction(&a, &b).unwrap(),
                &set_intersection(&a, &b).unwrap(),
            ).unwrap();
            prop_assert_eq!(back, a.clone());
            // De Morgan on indicators: A \ (B ∪ C) = (A\B) ∩ (A\C)
            let lhs = set_subtraction(&a, &set_union(&b, &c).unwrap()).unwrap();
            let rhs = set_intersection(
                &set_subtraction(&a, &b).unwrap(),
                &set_subtraction(&a, &c).unwrap(),
            ).unwrap();
            prop_assert_eq!(lhs, rhs);
        }
    }
}
