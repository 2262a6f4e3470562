//! The n-gram label-history automaton: state indexing, transitions, string
//! intersection, and the blockwise vectorized forward-transition kernel.
//!
//! States are label histories of length up to `order`, indexed first by
//! history length and then lexicographically, so index 0 is the empty
//! history. Indexing this way gives the property the vectorized kernel is
//! built on: the transitions leaving a fixed state land in a contiguous
//! destination range. Concretely, a state with index `j` and a non-maximal
//! history sends label `y` to `j * V + 1 + y`; states with maximal history
//! split into `V` blocks by their oldest label, and each block maps onto the
//! same destination range, so the kernel is a flat copy for the short
//! histories plus a `V`-way reduction for the full ones.

use crate::semiring::{Semiring, Weight};
use crate::{Error, Result};
use ndarray::ArrayView2;

/// Deterministic, epsilon-free automaton over label histories of length up
/// to `order`. Every state is final; every state has exactly one outgoing
/// transition per label.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ContextDependency {
    order: usize,
    vocab: usize,
    num_states: usize,
    /// Index of the first maximal-length history (`offset(order)`).
    full_start: usize,
}

/// Number of history states for the given order and vocabulary size:
/// `sum_{i=0}^{order} V^i`. Computed by summation so `V = 1` works, with
/// checked arithmetic so an oversized request is reported rather than
/// wrapped.
pub fn num_states(order: usize, vocab: usize) -> Result<usize> {
    level_offset(order + 1, vocab)
}

/// `offset(len)` = index of the first state whose history has length `len`,
/// i.e. the number of states with shorter histories.
fn level_offset(len: usize, vocab: usize) -> Result<usize> {
    let mut total = 0usize;
    let mut level = 1usize;
    for _ in 0..len {
        total = total
            .checked_add(level)
            .ok_or_else(|| Error::Overflow(format!("state count for vocab {vocab}")))?;
        level = level
            .checked_mul(vocab)
            .ok_or_else(|| Error::Overflow(format!("state count for vocab {vocab}")))?;
    }
    Ok(total)
}

impl ContextDependency {
    pub fn new(order: usize, vocab: usize) -> Result<Self> {
        if vocab == 0 {
            return Err(Error::Config("vocab must be at least 1".into()));
        }
        let n = num_states(order, vocab)?;
        let full_start = level_offset(order, vocab)?;
        Ok(ContextDependency {
            order,
            vocab,
            num_states: n,
            full_start,
        })
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn vocab(&self) -> usize {
        self.vocab
    }

    pub fn num_states(&self) -> usize {
        self.num_states
    }

    /// The initial state: empty history.
    pub fn initial(&self) -> usize {
        0
    }

    /// Index of the state for the given history (most recent label last).
    pub fn state_index(&self, history: &[usize]) -> Result<usize> {
        if history.len() > self.order {
            return Err(Error::Config(format!(
                "history length {} exceeds order {}",
                history.len(),
                self.order
            )));
        }
        let mut value = 0usize;
        for &y in history {
            if y >= self.vocab {
                return Err(Error::Config(format!(
                    "label {y} out of range for vocab {}",
                    self.vocab
                )));
            }
            value = value * self.vocab + y;
        }
        Ok(level_offset(history.len(), self.vocab).expect("within num_states") + value)
    }

    /// Inverse of [`state_index`](Self::state_index).
    pub fn history_of(&self, state: usize) -> Vec<usize> {
        debug_assert!(state < self.num_states);
        let mut len = 0;
        let mut offset = 0;
        let mut level = 1;
        // Find the history length whose block contains `state`.
        while offset + level <= state {
            offset += level;
            level *= self.vocab;
            len += 1;
        }
        let mut value = state - offset;
        let mut history = vec![0usize; len];
        for slot in history.iter_mut().rev() {
            *slot = value % self.vocab;
            value /= self.vocab;
        }
        history
    }

    /// Destination of the transition `(state, label)`: the suffix of
    /// `history(state) . label` of length at most `order`.
    pub fn next_state(&self, state: usize, label: usize) -> usize {
        debug_assert!(state < self.num_states && label < self.vocab);
        if self.order == 0 {
            return 0;
        }
        if state < self.full_start {
            // Short history: append. Contiguous-range form of
            // offset(len+1) + value*V + label.
            state * self.vocab + 1 + label
        } else {
            // Maximal history: drop the oldest label, append the new one.
            let value = state - self.full_start;
            let tail_base = self.vocab.pow(self.order as u32 - 1);
            self.full_start + (value % tail_base) * self.vocab + label
        }
    }

    /// One step of the vectorized forward sweep: given per-state forward
    /// weights `alpha` and per-(state, label) transition weights
    /// `omega_labels` (shape `num_states x vocab`), returns the new forward
    /// weights after all label transitions:
    /// `out[q'] = plus over (q, y) with next_state(q, y) = q' of
    /// alpha[q] times omega_labels[q, y]`.
    ///
    /// Short-history states scatter into disjoint destinations (one plain
    /// write each); the maximal-history block is accumulated over its `V`
    /// source sub-blocks in ascending order, so results are identical from
    /// run to run.
    pub fn next_context_vectorized(
        &self,
        kind: Semiring,
        alpha: &[Weight],
        omega_labels: &ArrayView2<Weight>,
    ) -> Result<Vec<Weight>> {
        let n = self.num_states;
        let v = self.vocab;
        if alpha.len() != n || omega_labels.shape() != [n, v] {
            return Err(Error::Dimension(format!(
                "alpha {} / omega {:?} vs {} states x {} labels",
                alpha.len(),
                omega_labels.shape(),
                n,
                v
            )));
        }
        if self.order == 0 {
            // Single-state automaton: all labels loop back to the start.
            let mut acc = kind.zero();
            for y in 0..v {
                acc = kind.plus(acc, omega_labels[[0, y]]);
            }
            return Ok(vec![kind.times(alpha[0], acc)]);
        }
        let mut out = vec![kind.zero(); n];
        for q in 0..self.full_start {
            let base = q * v + 1;
            for y in 0..v {
                out[base + y] = kind.times(alpha[q], omega_labels[[q, y]]);
            }
        }
        let tail_base = v.pow(self.order as u32 - 1);
        for block in 0..v {
            let src0 = self.full_start + block * tail_base;
            for r in 0..tail_base {
                let q = src0 + r;
                let dst0 = self.full_start + r * v;
                for y in 0..v {
                    out[dst0 + y] =
                        kind.plus(out[dst0 + y], kind.times(alpha[q], omega_labels[[q, y]]));
                }
            }
        }
        Ok(out)
    }

    /// Intersection with a single label string.
    pub fn intersect_string(&self, labels: &[usize]) -> Result<StringContext> {
        for &y in labels {
            if y >= self.vocab {
                return Err(Error::Config(format!(
                    "label {y} out of range for vocab {}",
                    self.vocab
                )));
            }
        }
        let mut base_states = Vec::with_capacity(labels.len() + 1);
        for u in 0..=labels.len() {
            let start = u.saturating_sub(self.order);
            base_states.push(self.state_index(&labels[start..u])?);
        }
        Ok(StringContext {
            labels: labels.to_vec(),
            base_states,
        })
    }
}

/// The intersection of a context dependency with one label string: a chain
/// of `len + 1` states where state `u` has consumed the prefix of length `u`
/// and carries the base-context state for that prefix's recent history.
/// Weight lookups for the single outgoing arc of state `u` go through
/// `base_states[u]`; only the last state is final.
#[derive(Debug, Clone)]
pub struct StringContext {
    labels: Vec<usize>,
    base_states: Vec<usize>,
}

impl StringContext {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    /// Base-context state of chain state `u` (history = last labels of the
    /// consumed prefix, truncated to the base order).
    pub fn base_state(&self, u: usize) -> usize {
        self.base_states[u]
    }

    pub fn base_states(&self) -> &[usize] {
        &self.base_states
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn state_counts() {
        assert_eq!(num_states(2, 2).unwrap(), 7);
        assert_eq!(num_states(0, 17).unwrap(), 1);
        assert_eq!(num_states(2, 32).unwrap(), 1057);
        assert_eq!(num_states(3, 1).unwrap(), 4); // degenerate alphabet
        assert!(num_states(40, 64).is_err()); // must report, not wrap
    }

    #[test]
    fn state_indexing_two_gram() {
        // 7-state machine over {a, b}: i, a, b, aa, ab, ba, bb.
        let c = ContextDependency::new(2, 2).unwrap();
        let a = 0;
        let b = 1;
        assert_eq!(c.state_index(&[]).unwrap(), 0);
        assert_eq!(c.state_index(&[a]).unwrap(), 1);
        assert_eq!(c.state_index(&[b]).unwrap(), 2);
        assert_eq!(c.state_index(&[a, a]).unwrap(), 3);
        assert_eq!(c.state_index(&[a, b]).unwrap(), 4);
        assert_eq!(c.state_index(&[b, a]).unwrap(), 5);
        assert_eq!(c.state_index(&[b, b]).unwrap(), 6);
        assert!(c.state_index(&[a, b, a]).is_err());
        assert!(c.state_index(&[2]).is_err());
    }

    #[test]
    fn index_history_bijection() {
        let c = ContextDependency::new(2, 3).unwrap();
        for q in 0..c.num_states() {
            let h = c.history_of(q);
            assert_eq!(c.state_index(&h).unwrap(), q);
        }
    }

    #[test]
    fn two_gram_transition_table() {
        let c = ContextDependency::new(2, 2).unwrap();
        let (a, b) = (0, 1);
        let idx = |h: &[usize]| c.state_index(h).unwrap();
        // All 14 transitions of the 7-state machine.
        let table = [
            (vec![], a, vec![a]),
            (vec![], b, vec![b]),
            (vec![a], a, vec![a, a]),
            (vec![a], b, vec![a, b]),
            (vec![b], a, vec![b, a]),
            (vec![b], b, vec![b, b]),
            (vec![a, a], a, vec![a, a]),
            (vec![a, a], b, vec![a, b]),
            (vec![a, b], a, vec![b, a]),
            (vec![a, b], b, vec![b, b]),
            (vec![b, a], a, vec![a, a]),
            (vec![b, a], b, vec![a, b]),
            (vec![b, b], a, vec![b, a]),
            (vec![b, b], b, vec![b, b]),
        ];
        for (src, y, dst) in table {
            assert_eq!(c.next_state(idx(&src), y), idx(&dst), "{src:?} --{y}-->");
        }
    }

    #[test]
    fn order_zero_self_loops() {
        let c = ContextDependency::new(0, 5).unwrap();
        for y in 0..5 {
            assert_eq!(c.next_state(0, y), 0);
        }
    }

    #[test]
    fn next_state_matches_suffix_definition() {
        for order in 0..=3 {
            for vocab in 1..=4 {
                let c = ContextDependency::new(order, vocab).unwrap();
                for q in 0..c.num_states() {
                    let mut h = c.history_of(q);
                    for y in 0..vocab {
                        h.push(y);
                        let start = h.len().saturating_sub(order);
                        let expect = c.state_index(&h[start..]).unwrap();
                        assert_eq!(c.next_state(q, y), expect);
                        h.pop();
                    }
                }
            }
        }
    }

    #[test]
    fn destination_ranges_are_contiguous() {
        // Transitions leaving a fixed state land in a contiguous index range.
        for order in 1..=3 {
            for vocab in 2..=5 {
                let c = ContextDependency::new(order, vocab).unwrap();
                for q in 0..c.num_states() {
                    let first = c.next_state(q, 0);
                    for y in 0..vocab {
                        assert_eq!(c.next_state(q, y), first + y);
                    }
                }
            }
        }
    }

    fn naive_scatter(
        c: &ContextDependency,
        kind: Semiring,
        alpha: &[Weight],
        omega: &Array2<Weight>,
    ) -> Vec<Weight> {
        let mut out = vec![kind.zero(); c.num_states()];
        for q in 0..c.num_states() {
            for y in 0..c.vocab() {
                let d = c.next_state(q, y);
                out[d] = kind.plus(out[d], kind.times(alpha[q], omega[[q, y]]));
            }
        }
        out
    }

    #[test]
    fn vectorized_equals_naive_scatter() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for &kind in &[Semiring::Log, Semiring::Tropical, Semiring::Real] {
            for order in 0..=3 {
                for vocab in [2usize, 4] {
                    let c = ContextDependency::new(order, vocab).unwrap();
                    let n = c.num_states();
                    let alpha: Vec<f64> = (0..n)
                        .map(|_| match kind {
                            Semiring::Real => rng.gen_range(0.0..2.0),
                            _ => rng.gen_range(-3.0..3.0),
                        })
                        .collect();
                    let omega = Array2::from_shape_fn((n, vocab), |_| match kind {
                        Semiring::Real => rng.gen_range(0.0..2.0),
                        _ => rng.gen_range(-3.0..3.0),
                    });
                    let got = c
                        .next_context_vectorized(kind, &alpha, &omega.view())
                        .unwrap();
                    let want = naive_scatter(&c, kind, &alpha, &omega);
                    for (g, w) in got.iter().zip(&want) {
                        let ok = (g == w) || (g - w).abs() <= 1e-12 * (1.0 + w.abs());
                        assert!(ok, "order {order} vocab {vocab} {kind:?}: {g} vs {w}");
                    }
                }
            }
        }
    }

    #[test]
    fn vectorized_order_zero_reduces_labels() {
        let c = ContextDependency::new(0, 2).unwrap();
        let omega = Array2::from_shape_vec((1, 2), vec![1.25, 0.5]).unwrap();
        let got = c
            .next_context_vectorized(Semiring::Log, &[0.0], &omega.view())
            .unwrap();
        let want = Semiring::Log.plus(1.25, 0.5);
        assert!((got[0] - want).abs() < 1e-15);
    }

    #[test]
    fn vectorized_one_hot_single_transition() {
        let c = ContextDependency::new(2, 2).unwrap();
        let n = c.num_states();
        let mut alpha = vec![f64::INFINITY; n];
        alpha[0] = 0.0; // one-hot at the empty history
        let mut omega = Array2::from_elem((n, 2), f64::INFINITY);
        omega[[0, 0]] = 0.0; // only (i, a) is live
        let got = c
            .next_context_vectorized(Semiring::Log, &alpha, &omega.view())
            .unwrap();
        for (q, w) in got.iter().enumerate() {
            if q == 1 {
                assert_eq!(*w, 0.0); // state "a"
            } else {
                assert_eq!(*w, f64::INFINITY);
            }
        }
    }

    #[test]
    fn vectorized_dimension_mismatch() {
        let c = ContextDependency::new(1, 2).unwrap();
        let omega = Array2::from_elem((2, 2), 0.0);
        assert!(matches!(
            c.next_context_vectorized(Semiring::Log, &[0.0; 3], &omega.view()),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn string_intersection_examples() {
        let c = ContextDependency::new(2, 2).unwrap();
        let sc = c.intersect_string(&[0, 1]).unwrap(); // "ab"
        assert_eq!(sc.len(), 2);
        assert_eq!(sc.base_states(), &[0, 1, 4]); // i, a, ab

        let empty = c.intersect_string(&[]).unwrap();
        assert_eq!(empty.base_states(), &[0]);

        let c1 = ContextDependency::new(1, 2).unwrap();
        let sc = c1.intersect_string(&[0, 1, 0, 1]).unwrap(); // "abab"
        assert_eq!(sc.base_states(), &[0, 1, 2, 1, 2]); // i, a, b, a, b
    }

    proptest! {
        #[test]
        fn bijection_random_histories(
            order in 0usize..4,
            vocab in 1usize..5,
            raw in proptest::collection::vec(0usize..16, 0..4),
        ) {
            let c = ContextDependency::new(order, vocab).unwrap();
            let h: Vec<usize> = raw.iter().take(order).map(|x| x % vocab).collect();
            let q = c.state_index(&h).unwrap();
            prop_assert!(q < c.num_states());
            prop_assert_eq!(c.history_of(q), h);
        }
    }
}
