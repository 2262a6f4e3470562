//! Implicit alignment-lattice topologies: which frames may emit labels,
//! where epsilon transitions go, and how states map to feature positions.
//!
//! Three families. `Frame` aligns at most one label per frame, with an
//! optional epsilon arc that skips the frame. `LabelFrame` allows up to `k`
//! consecutive labels per frame before an epsilon advances to the next
//! frame. `Label` tracks only the position in the label sequence, bounded by
//! `max_labels`, with epsilon as explicit termination.
//!
//! States are plain indices in topological order; successors are computed,
//! never materialized. In all three families the label transitions leaving a
//! state share a single destination, and there is at most one epsilon
//! destination, which is what lets the forward sweep accumulate one vector
//! per state.

use crate::{Error, Result};

/// Which encoder activations the arcs leaving an alignment state read.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FeatureIndex {
    /// Arcs read the activation row of this frame.
    Frame(usize),
    /// No frame position (label-dependent lattices): arcs read a pooled
    /// whole-sequence summary.
    Pooled,
}

/// An alignment lattice topology. Immutable; all queries are reentrant.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AlignmentLattice {
    /// States `0..=frames`; from `t < frames` every label and (optionally)
    /// epsilon advance to `t + 1`.
    Frame { frames: usize, epsilon: bool },
    /// States `(t, n)` for `t < frames`, `n <= labels_per_frame`, plus the
    /// final `(frames, 0)`. Labels step `n`; epsilon resets to `(t + 1, 0)`
    /// from every `n`.
    LabelFrame {
        frames: usize,
        labels_per_frame: usize,
    },
    /// States `0..=max_labels`; labels advance, epsilon jumps to the final
    /// state from anywhere.
    Label { max_labels: usize },
}

impl AlignmentLattice {
    pub fn frame(frames: usize) -> Self {
        AlignmentLattice::Frame {
            frames,
            epsilon: true,
        }
    }

    pub fn label_frame(frames: usize, labels_per_frame: usize) -> Result<Self> {
        if labels_per_frame == 0 {
            return Err(Error::Config("labels_per_frame must be at least 1".into()));
        }
        Ok(AlignmentLattice::LabelFrame {
            frames,
            labels_per_frame,
        })
    }

    pub fn label(max_labels: usize) -> Self {
        AlignmentLattice::Label { max_labels }
    }

    pub fn num_states(&self) -> usize {
        match *self {
            AlignmentLattice::Frame { frames, .. } => frames + 1,
            AlignmentLattice::LabelFrame {
                frames,
                labels_per_frame,
            } => frames * (labels_per_frame + 1) + 1,
            AlignmentLattice::Label { max_labels } => max_labels + 1,
        }
    }

    /// Number of input frames the lattice was built for.
    pub fn frames(&self) -> usize {
        match *self {
            AlignmentLattice::Frame { frames, .. } => frames,
            AlignmentLattice::LabelFrame { frames, .. } => frames,
            // Label-dependent lattices do not constrain the frame count.
            AlignmentLattice::Label { .. } => 0,
        }
    }

    pub fn initial(&self) -> usize {
        0
    }

    pub fn is_final(&self, state: usize) -> bool {
        state == self.num_states() - 1
    }

    /// States in topological order: every arc goes forward in this order.
    pub fn states_topo(&self) -> std::ops::Range<usize> {
        0..self.num_states()
    }

    /// `(t, n)` coordinates of a label-frame state.
    fn label_frame_coords(state: usize, labels_per_frame: usize) -> (usize, usize) {
        (
            state / (labels_per_frame + 1),
            state % (labels_per_frame + 1),
        )
    }

    /// Which feature row the arcs leaving `state` read.
    pub fn feature_index(&self, state: usize) -> FeatureIndex {
        match *self {
            AlignmentLattice::Frame { .. } => FeatureIndex::Frame(state),
            AlignmentLattice::LabelFrame {
                labels_per_frame, ..
            } => FeatureIndex::Frame(Self::label_frame_coords(state, labels_per_frame).0),
            AlignmentLattice::Label { .. } => FeatureIndex::Pooled,
        }
    }

    /// Unique destination of label transitions leaving `state`, if any.
    pub fn label_successor(&self, state: usize) -> Option<usize> {
        match *self {
            AlignmentLattice::Frame { frames, .. } => (state < frames).then(|| state + 1),
            AlignmentLattice::LabelFrame {
                frames,
                labels_per_frame,
            } => {
                if self.is_final(state) {
                    return None;
                }
                let (t, n) = Self::label_frame_coords(state, labels_per_frame);
                (t < frames && n < labels_per_frame).then(|| state + 1)
            }
            AlignmentLattice::Label { max_labels } => (state < max_labels).then(|| state + 1),
        }
    }

    /// Destination of the epsilon transition leaving `state`, if any. Each
    /// family has at most one.
    pub fn epsilon_successor(&self, state: usize) -> Option<usize> {
        match *self {
            AlignmentLattice::Frame { frames, epsilon } => {
                (epsilon && state < frames).then(|| state + 1)
            }
            AlignmentLattice::LabelFrame {
                frames,
                labels_per_frame,
            } => {
                if self.is_final(state) {
                    return None;
                }
                let (t, _) = Self::label_frame_coords(state, labels_per_frame);
                (t < frames).then(|| (t + 1) * (labels_per_frame + 1))
            }
            AlignmentLattice::Label { max_labels } => (state < max_labels).then_some(max_labels),
        }
    }

    /// Number of successful paths when every label transition can carry any
    /// of `vocab` labels. Oracle-scale use only; overflow is reported.
    pub fn count_paths(&self, vocab: usize) -> Result<u128> {
        let n = self.num_states();
        let mut counts = vec![0u128; n];
        counts[n - 1] = 1;
        let overflow = || Error::Overflow("path count".into());
        for state in (0..n.saturating_sub(1)).rev() {
            let mut total = 0u128;
            if let Some(succ) = self.label_successor(state) {
                let via_labels = counts[succ]
                    .checked_mul(vocab as u128)
                    .ok_or_else(overflow)?;
                total = total.checked_add(via_labels).ok_or_else(overflow)?;
            }
            if let Some(succ) = self.epsilon_successor(state) {
                total = total.checked_add(counts[succ]).ok_or_else(overflow)?;
            }
            counts[state] = total;
        }
        Ok(counts[0])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn enumerate_paths(lat: &AlignmentLattice, vocab: usize) -> u128 {
        fn walk(lat: &AlignmentLattice, state: usize, vocab: usize) -> u128 {
            let mut total = if lat.is_final(state) { 1 } else { 0 };
            if let Some(succ) = lat.label_successor(state) {
                total += vocab as u128 * walk(lat, succ, vocab);
            }
            if let Some(succ) = lat.epsilon_successor(state) {
                total += walk(lat, succ, vocab);
            }
            total
        }
        walk(lat, lat.initial(), vocab)
    }

    #[test]
    fn frame_lattice_shape() {
        let lat = AlignmentLattice::frame(3);
        assert_eq!(lat.num_states(), 4);
        assert_eq!(lat.label_successor(1), Some(2));
        assert_eq!(lat.epsilon_successor(1), Some(2));
        assert_eq!(lat.label_successor(3), None);
        assert_eq!(lat.epsilon_successor(3), None);
        assert!(lat.is_final(3));

        let empty = AlignmentLattice::frame(0);
        assert_eq!(empty.num_states(), 1);
        assert!(empty.is_final(empty.initial()));
    }

    #[test]
    fn frame_without_epsilon() {
        let lat = AlignmentLattice::Frame {
            frames: 2,
            epsilon: false,
        };
        assert_eq!(lat.epsilon_successor(0), None);
        assert_eq!(lat.label_successor(0), Some(1));
        assert_eq!(lat.count_paths(3).unwrap(), 9);
    }

    #[test]
    fn label_frame_lattice_shape() {
        // T=3, k=2: (0,0)..(2,2) plus (3,0).
        let lat = AlignmentLattice::label_frame(3, 2).unwrap();
        assert_eq!(lat.num_states(), 10);
        let idx = |t: usize, n: usize| t * 3 + n;
        assert_eq!(lat.label_successor(idx(0, 1)), Some(idx(0, 2)));
        assert_eq!(lat.label_successor(idx(0, 2)), None); // hit the cap
        assert_eq!(lat.epsilon_successor(idx(0, 0)), Some(idx(1, 0)));
        assert_eq!(lat.epsilon_successor(idx(0, 2)), Some(idx(1, 0)));
        assert_eq!(lat.epsilon_successor(idx(2, 1)), Some(9));
        assert!(lat.is_final(9));
        assert_eq!(lat.feature_index(idx(1, 2)), FeatureIndex::Frame(1));
    }

    #[test]
    fn label_lattice_shape() {
        let lat = AlignmentLattice::label(3);
        assert_eq!(lat.num_states(), 4);
        assert_eq!(lat.epsilon_successor(1), Some(3));
        assert_eq!(lat.epsilon_successor(3), None);
        assert_eq!(lat.label_successor(3), None);
        assert_eq!(lat.feature_index(2), FeatureIndex::Pooled);
    }

    #[test]
    fn topological_order_and_acyclicity() {
        let lattices = [
            AlignmentLattice::frame(8),
            AlignmentLattice::Frame {
                frames: 8,
                epsilon: false,
            },
            AlignmentLattice::label_frame(8, 3).unwrap(),
            AlignmentLattice::label(8),
        ];
        for lat in lattices {
            for q in lat.states_topo() {
                if let Some(s) = lat.label_successor(q) {
                    assert!(s > q, "{lat:?}: label arc {q} -> {s}");
                }
                if let Some(s) = lat.epsilon_successor(q) {
                    assert!(s > q, "{lat:?}: eps arc {q} -> {s}");
                }
                if lat.is_final(q) {
                    assert!(lat.label_successor(q).is_none());
                    assert!(lat.epsilon_successor(q).is_none());
                }
            }
        }
    }

    #[test]
    fn path_counts() {
        // Frame lattice: (V + 1)^T.
        assert_eq!(AlignmentLattice::frame(4).count_paths(2).unwrap(), 81);
        assert_eq!(AlignmentLattice::frame(0).count_paths(7).unwrap(), 1);
        for t in 0..=6 {
            for v in 1..=3 {
                let lat = AlignmentLattice::frame(t);
                assert_eq!(lat.count_paths(v).unwrap(), ((v + 1) as u128).pow(t as u32));
            }
        }
        // DP equals explicit enumeration on the other families.
        let lat = AlignmentLattice::label_frame(2, 1).unwrap();
        assert_eq!(lat.count_paths(2).unwrap(), enumerate_paths(&lat, 2));
        for t in 0..=3 {
            for k in 1..=3 {
                for v in 1..=3 {
                    let lat = AlignmentLattice::label_frame(t, k).unwrap();
                    assert_eq!(lat.count_paths(v).unwrap(), enumerate_paths(&lat, v));
                }
            }
        }
        for l in 0..=5 {
            let lat = AlignmentLattice::label(l);
            assert_eq!(lat.count_paths(2).unwrap(), enumerate_paths(&lat, 2));
        }
    }

    #[test]
    fn label_lattice_small_path_set() {
        // l=2, V=2: the empty termination, two one-label paths, and four
        // two-label paths.
        let lat = AlignmentLattice::label(2);
        assert_eq!(lat.count_paths(2).unwrap(), 7);
    }

    #[test]
    fn count_overflow_reported() {
        let lat = AlignmentLattice::frame(300);
        assert!(matches!(lat.count_paths(5), Err(Error::Overflow(_))));
    }
}
