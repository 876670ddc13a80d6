//! Attention states and their reduction algebra.
//!
//! The canonical result of attending a query against an index set of kv
//! entries is the pair (output, lse): the softmax-weighted value sum together
//! with the log-sum-exp of the raw scores. Two states over disjoint index
//! sets combine into the state of the union with [`AttentionState::merge`],
//! which is associative and commutative, so partial attention can be computed
//! in chunks and contracted in any grouping.
//!
//! All merge arithmetic is max-shifted: instead of forming `exp(lse)` terms
//! directly (which overflows for modest scores), both sides are rescaled by
//! `exp(lse - max(lse_a, lse_b))` first. The result is algebraically the same
//! state.

use crate::error::{Error, Result};
use crate::scalar::{dot, Scalar};

/// Partial attention result for one query row: normalized output plus the
/// log-sum-exp of the raw scores over the covered kv indices.
///
/// The empty index set is represented as `(zero vector, -inf)` and is the
/// identity of [`AttentionState::merge`].
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionState<T> {
    pub output: Vec<T>,
    pub lse: T,
}

impl<T: Scalar> AttentionState<T> {
    /// State over the empty index set: zero output, `lse = -inf`.
    pub fn empty(dim: usize) -> Self {
        Self {
            output: vec![T::ZERO; dim],
            lse: T::NEG_INFINITY,
        }
    }

    #[inline]
    pub fn dim(&self) -> usize {
        self.output.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.lse == T::NEG_INFINITY
    }

    /// Combine two states over disjoint index sets into the state of the
    /// union. Identity on either side returns the other operand unchanged.
    pub fn merge(&self, other: &Self) -> Result<Self> {
        if self.dim() != other.dim() {
            return Err(Error::DimensionMismatch {
                context: format!("merge of dims {} and {}", self.dim(), other.dim()),
            });
        }
        if self.is_empty() {
            return Ok(other.clone());
        }
        if other.is_empty() {
            return Ok(self.clone());
        }
        let m = self.lse.maximum(other.lse);
        let wa = (self.lse - m).exp();
        let wb = (other.lse - m).exp();
        let denom = wa + wb;
        let output = self
            .output
            .iter()
            .zip(other.output.iter())
            .map(|(a, b)| (wa * *a + wb * *b) / denom)
            .collect();
        Ok(Self {
            output,
            lse: m + denom.ln(),
        })
    }
}

/// Left-fold of [`AttentionState::merge`] over a nonempty list, in list order.
pub fn merge_all<T: Scalar>(states: &[AttentionState<T>]) -> Result<AttentionState<T>> {
    let (first, rest) = states.split_first().ok_or(Error::EmptyStateList)?;
    let mut acc = first.clone();
    for s in rest {
        acc = acc.merge(s)?;
    }
    Ok(acc)
}

/// Running weighted value sum for softmax-free variants. Carries no scale;
/// states over disjoint index sets combine by elementwise addition, with the
/// zero vector as identity.
#[derive(Clone, Debug, PartialEq)]
pub struct ScaleFreeState<T> {
    pub output: Vec<T>,
}

impl<T: Scalar> ScaleFreeState<T> {
    pub fn zero(dim: usize) -> Self {
        Self {
            output: vec![T::ZERO; dim],
        }
    }

    #[inline]
    pub fn dim(&self) -> usize {
        self.output.len()
    }

    pub fn merge(&self, other: &Self) -> Result<Self> {
        if self.dim() != other.dim() {
            return Err(Error::DimensionMismatch {
                context: format!("merge of dims {} and {}", self.dim(), other.dim()),
            });
        }
        let output = self
            .output
            .iter()
            .zip(other.output.iter())
            .map(|(a, b)| *a + *b)
            .collect();
        Ok(Self { output })
    }
}

/// `log(sum(exp(s_i)))`, max-shifted for stability. The empty list yields
/// `-inf`.
pub fn lse_of_scores<T: Scalar>(scores: &[T]) -> T {
    let mut m = T::NEG_INFINITY;
    for s in scores {
        m = m.maximum(*s);
    }
    if m == T::NEG_INFINITY {
        return T::NEG_INFINITY;
    }
    let mut sum = T::ZERO;
    for s in scores {
        sum += (*s - m).exp();
    }
    m + sum.ln()
}

/// Reference attention state of one query against `n` raw key/value rows:
/// scores are plain dot products, weights their softmax. No variant hooks are
/// applied. `n = 0` yields the empty state.
pub fn attention_state<T: Scalar>(
    q: &[T],
    keys: &[T],
    values: &[T],
    n: usize,
) -> Result<AttentionState<T>> {
    let dim = q.len();
    if keys.len() != n * dim || values.len() != n * dim {
        return Err(Error::DimensionMismatch {
            context: format!(
                "attention_state: q dim {dim}, {n} rows, keys {} values {}",
                keys.len(),
                values.len()
            ),
        });
    }
    if n == 0 {
        return Ok(AttentionState::empty(dim));
    }
    let scores: Vec<T> = (0..n)
        .map(|i| dot(q, &keys[i * dim..(i + 1) * dim]))
        .collect();
    let lse = lse_of_scores(&scores);
    let mut output = vec![T::ZERO; dim];
    for (i, s) in scores.iter().enumerate() {
        let w = (*s - lse).exp();
        for (o, v) in output.iter_mut().zip(&values[i * dim..(i + 1) * dim]) {
            *o += w * *v;
        }
    }
    Ok(AttentionState { output, lse })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    const LN_2: f64 = std::f64::consts::LN_2;

    #[test]
    fn lse_empty_and_singleton() {
        assert_eq!(lse_of_scores::<f64>(&[]), f64::NEG_INFINITY);
        assert_eq!(lse_of_scores(&[0.0f64]), 0.0);
    }

    #[test]
    fn lse_pair_of_equal_scores() {
        for a in [-100.0f64, -1.5, 0.0, 3.25, 700.0] {
            let got = lse_of_scores(&[a, a]);
            assert!((got - (a + LN_2)).abs() < 1e-12, "a={a} got={got}");
        }
    }

    #[test]
    fn lse_matches_direct_evaluation() {
        let mut rng = StdRng::seed_from_u64(7);
        let scores: Vec<f64> = (0..64).map(|_| rng.random_range(-10.0..10.0)).collect();
        // naive direct evaluation; safe here because scores are small
        let direct = scores.iter().map(|s| s.exp()).sum::<f64>().ln();
        let got = lse_of_scores(&scores);
        assert!((got - direct).abs() < 1e-12);
    }

    #[test]
    fn attention_state_single_orthogonal_pair() {
        // q·k = 0 with one (k, v) pair: output is v, lse is 0
        let q = [1.0f64, 0.0];
        let k = [0.0f64, 1.0];
        let v = [3.0f64, -2.0];
        let st = attention_state(&q, &k, &v, 1).unwrap();
        assert_eq!(st.lse, 0.0);
        assert_eq!(st.output, v.to_vec());
    }

    #[test]
    fn attention_state_duplicate_pair() {
        let q = [0.5f64, -1.0, 2.0];
        let k = [1.0f64, 0.25, -0.5];
        let v = [2.0f64, 0.0, 1.0];
        let keys = [k, k].concat();
        let values = [v, v].concat();
        let st = attention_state(&q, &keys, &values, 2).unwrap();
        let s = q.iter().zip(&k).map(|(a, b)| a * b).sum::<f64>();
        assert!((st.lse - (s + LN_2)).abs() < 1e-12);
        for (o, expect) in st.output.iter().zip(&v) {
            assert!((o - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn attention_state_matches_brute_force() {
        let mut rng = StdRng::seed_from_u64(11);
        let d = 8;
        let n = 8;
        let q: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let keys: Vec<f64> = (0..n * d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let values: Vec<f64> = (0..n * d).map(|_| rng.random_range(-1.0..1.0)).collect();

        // brute force in the literal form: exp weights normalized by sum
        let scores: Vec<f64> = (0..n)
            .map(|i| {
                q.iter()
                    .zip(&keys[i * d..(i + 1) * d])
                    .map(|(a, b)| a * b)
                    .sum()
            })
            .collect();
        let total: f64 = scores.iter().map(|s| s.exp()).sum();
        let mut expect = vec![0.0f64; d];
        for (i, s) in scores.iter().enumerate() {
            let w = s.exp() / total;
            for (e, v) in expect.iter_mut().zip(&values[i * d..(i + 1) * d]) {
                *e += w * v;
            }
        }

        let st = attention_state(&q, &keys, &values, n).unwrap();
        assert!((st.lse - total.ln()).abs() < 1e-12);
        for (o, e) in st.output.iter().zip(&expect) {
            assert!((o - e).abs() < 1e-12);
        }
    }

    #[test]
    fn attention_state_empty_set() {
        let st = attention_state::<f64>(&[0.0; 4], &[], &[], 0).unwrap();
        assert!(st.is_empty());
        assert_eq!(st.output, vec![0.0; 4]);
    }

    #[test]
    fn attention_state_rejects_bad_shapes() {
        assert!(attention_state::<f64>(&[0.0; 4], &[0.0; 7], &[0.0; 8], 2).is_err());
    }

    fn random_state(rng: &mut StdRng, dim: usize) -> AttentionState<f64> {
        AttentionState {
            output: (0..dim).map(|_| rng.random_range(-2.0..2.0)).collect(),
            lse: rng.random_range(-5.0..5.0),
        }
    }

    #[test]
    fn merge_identity_is_bit_exact() {
        let mut rng = StdRng::seed_from_u64(3);
        let s = random_state(&mut rng, 6);
        let e = AttentionState::empty(6);
        assert_eq!(e.merge(&s).unwrap(), s);
        assert_eq!(s.merge(&e).unwrap(), s);
        assert!(e.merge(&e).unwrap().is_empty());
    }

    #[test]
    fn merge_self_doubles_mass() {
        let mut rng = StdRng::seed_from_u64(4);
        let s = random_state(&mut rng, 5);
        let m = s.merge(&s).unwrap();
        assert!((m.lse - (s.lse + LN_2)).abs() < 1e-12);
        for (a, b) in m.output.iter().zip(&s.output) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn merge_disjoint_equals_union() {
        let mut rng = StdRng::seed_from_u64(5);
        let d = 8;
        let n = 12;
        let q: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let keys: Vec<f64> = (0..n * d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let values: Vec<f64> = (0..n * d).map(|_| rng.random_range(-1.0..1.0)).collect();
        for split in [1, 4, 7, 11] {
            let a = attention_state(&q, &keys[..split * d], &values[..split * d], split).unwrap();
            let b =
                attention_state(&q, &keys[split * d..], &values[split * d..], n - split).unwrap();
            let merged = a.merge(&b).unwrap();
            let whole = attention_state(&q, &keys, &values, n).unwrap();
            assert!((merged.lse - whole.lse).abs() < 1e-12);
            for (x, y) in merged.output.iter().zip(&whole.output) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn merge_is_stable_for_large_scales() {
        // literal exponentials would overflow at lse ~ 1000
        let a = AttentionState {
            output: vec![1.0f64, 2.0],
            lse: 1000.0,
        };
        let b = AttentionState {
            output: vec![3.0f64, -1.0],
            lse: 998.0,
        };
        let m = a.merge(&b).unwrap();
        assert!(m.lse.is_finite());
        assert!(m.output.iter().all(|x| x.is_finite()));
        let wa = 1.0 / (1.0 + (-2.0f64).exp());
        let wb = 1.0 - wa;
        assert!((m.output[0] - (wa * 1.0 + wb * 3.0)).abs() < 1e-12);
    }

    #[test]
    fn merge_all_folds_in_order() {
        let mut rng = StdRng::seed_from_u64(6);
        let states: Vec<_> = (0..3).map(|_| random_state(&mut rng, 4)).collect();
        let single = merge_all(&states[..1]).unwrap();
        assert_eq!(single, states[0]);

        let left = merge_all(&states).unwrap();
        let right = states[0]
            .merge(&states[1].merge(&states[2]).unwrap())
            .unwrap();
        assert!((left.lse - right.lse).abs() < 1e-10);
        for (a, b) in left.output.iter().zip(&right.output) {
            assert!((a - b).abs() < 1e-10);
        }

        assert!(matches!(merge_all::<f64>(&[]), Err(Error::EmptyStateList)));
    }

    #[test]
    fn merge_all_of_singletons_matches_whole_set() {
        let mut rng = StdRng::seed_from_u64(8);
        let d = 4;
        let n = 16;
        let q: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let keys: Vec<f64> = (0..n * d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let values: Vec<f64> = (0..n * d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let singles: Vec<_> = (0..n)
            .map(|i| {
                attention_state(
                    &q,
                    &keys[i * d..(i + 1) * d],
                    &values[i * d..(i + 1) * d],
                    1,
                )
                .unwrap()
            })
            .collect();
        let folded = merge_all(&singles).unwrap();
        let whole = attention_state(&q, &keys, &values, n).unwrap();
        assert!((folded.lse - whole.lse).abs() < 1e-12);
        for (a, b) in folded.output.iter().zip(&whole.output) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn lse_grows_with_each_appended_element() {
        let mut rng = StdRng::seed_from_u64(9);
        for _ in 0..200 {
            let n = rng.random_range(1..32usize);
            let scores: Vec<f64> = (0..n).map(|_| rng.random_range(-8.0..8.0)).collect();
            let mut prev = f64::NEG_INFINITY;
            for i in 1..=n {
                let cur = lse_of_scores(&scores[..i]);
                assert!(cur > prev, "lse must grow: {prev} -> {cur}");
                prev = cur;
            }
        }
    }

    #[test]
    fn scale_free_merge_is_addition() {
        let a = ScaleFreeState {
            output: vec![1.0f64, 2.0],
        };
        let b = ScaleFreeState {
            output: vec![-0.5f64, 4.0],
        };
        assert_eq!(a.merge(&b).unwrap().output, vec![0.5, 6.0]);
        let z = ScaleFreeState::zero(2);
        assert_eq!(z.merge(&a).unwrap(), a);
    }
}
