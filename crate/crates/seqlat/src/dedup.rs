//! CTC-style label deduplication.
//!
//! The collapsing transducer has one state per label plus a reset state:
//! reading a label equal to the state emits nothing (a repeat), reading a
//! different label emits it and moves to its state, and epsilon resets to
//! the start. Composing it into the recognition lattice would multiply the
//! state count by `vocab + 1`, but for label-history contexts the
//! transducer state is redundant: a non-initial context state already knows
//! the last label it consumed, so the only states that can be reached pair
//! each context state with either the reset state (the "epsilon twin") or
//! that unique last label (the "repeat twin"). The forward sweep therefore
//! carries two vectors per alignment state instead of one, at most
//! `2 * |alignment states| * |context states|` slots.
//!
//! Two boundary cases:
//!
//! - The initial context has no incoming label, so its repeat twin is
//!   unreachable; the slot exists but stays at the zero element.
//! - An order-0 context is a single state with incoming arcs for every
//!   label, so the last-label inference fails. But with that context the
//!   weights cannot see the twin either, making all twins of a state
//!   future-equivalent: totals, posteriors, and best paths coincide with
//!   the plain sweep, and [`crate::inference`] routes order-0 dedup
//!   denominators there. Numerators are unaffected: the target-restricted
//!   chain always knows its last emitted label, whatever the base order.

use crate::context::{ContextDependency, StringContext};
use crate::inference::SweepSpace;

/// Collapse maximal runs of repeated non-epsilon labels, then drop the
/// epsilons. `None` is the epsilon entry.
pub fn ctc_collapse(alignment: &[Option<usize>]) -> Vec<usize> {
    let mut out = Vec::new();
    let mut prev: Option<usize> = None;
    for &z in alignment {
        match z {
            Some(y) => {
                if prev != Some(y) {
                    out.push(y);
                }
                prev = Some(y);
            }
            None => prev = None,
        }
    }
    out
}

/// The collapsing transducer itself: one state per label plus the reset
/// state. Deterministic on its input side; running any input sequence
/// through it and keeping the outputs is exactly [`ctc_collapse`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DedupTransducer {
    vocab: usize,
}

impl DedupTransducer {
    pub fn new(vocab: usize) -> Self {
        DedupTransducer { vocab }
    }

    /// States are the labels plus the reset state; everything is final.
    pub fn num_states(&self) -> usize {
        self.vocab + 1
    }

    /// The reset state (initial; also entered after every epsilon input).
    pub fn reset_state(&self) -> usize {
        self.vocab
    }

    /// One transition: `(next state, emitted label)`. A label equal to the
    /// state is a repeat and emits nothing; a different label emits itself
    /// and becomes the state; epsilon emits nothing and resets.
    pub fn step(&self, state: usize, input: Option<usize>) -> (usize, Option<usize>) {
        match input {
            Some(y) if y == state => (state, None),
            Some(y) => (y, Some(y)),
            None => (self.reset_state(), None),
        }
    }

    /// Run a whole input sequence from the reset state; returns the output
    /// label sequence.
    pub fn apply(&self, inputs: &[Option<usize>]) -> Vec<usize> {
        let mut state = self.reset_state();
        let mut out = Vec::new();
        for &z in inputs {
            let (next, emitted) = self.step(state, z);
            if let Some(y) = emitted {
                out.push(y);
            }
            state = next;
        }
        out
    }
}

/// Twin layout over the full context space, valid for order >= 1:
/// slots `[0, n)` are epsilon twins, `[n, 2n)` are repeat twins. Slot `n`
/// (the repeat twin of the initial context) is permanently dead.
pub(crate) struct DedupFullSpace<'a> {
    ctx: &'a ContextDependency,
    /// Unique incoming label of each non-initial context state.
    last_label: Vec<Option<usize>>,
}

impl<'a> DedupFullSpace<'a> {
    pub fn new(ctx: &'a ContextDependency) -> Self {
        debug_assert!(
            ctx.order() >= 1,
            "order-0 dedup collapses to the plain space"
        );
        let last_label = (0..ctx.num_states())
            .map(|q| ctx.history_of(q).last().copied())
            .collect();
        DedupFullSpace { ctx, last_label }
    }

    /// Slot count of the reduced construction for a given context size.
    pub fn reduced_slots(num_context_states: usize) -> usize {
        2 * num_context_states
    }
}

impl SweepSpace for DedupFullSpace<'_> {
    fn num_slots(&self) -> usize {
        Self::reduced_slots(self.ctx.num_states())
    }

    fn initial_slot(&self) -> usize {
        self.ctx.initial()
    }

    fn final_slots(&self) -> Vec<usize> {
        // Every context state is final, either twin.
        (0..self.num_slots()).collect()
    }

    fn omega_row(&self, slot: usize) -> usize {
        slot % self.ctx.num_states()
    }

    fn label_transitions(&self, slot: usize, f: &mut dyn FnMut(usize, usize, Option<usize>)) {
        let n = self.ctx.num_states();
        let qc = slot % n;
        let is_repeat_twin = slot >= n;
        for y in 0..self.ctx.vocab() {
            if is_repeat_twin && self.last_label[qc] == Some(y) {
                // Repeat: collapses into the previous emission; the context
                // holds its place.
                f(y, n + qc, None);
            } else {
                f(y, n + self.ctx.next_state(qc, y), Some(y));
            }
        }
    }

    fn eps_dest(&self, slot: usize) -> usize {
        // Either twin resets to the epsilon twin of the same context state.
        slot % self.ctx.num_states()
    }
}

/// Twin layout over a target-string chain: slots `[0, len]` are epsilon
/// twins of the prefix states, slots `[len + 1, 2 len]` are repeat twins of
/// prefixes of length >= 1 (prefix `u` at slot `len + u`).
pub(crate) struct DedupStringSpace<'a> {
    chain: &'a StringContext,
}

impl<'a> DedupStringSpace<'a> {
    pub fn new(chain: &'a StringContext) -> Self {
        DedupStringSpace { chain }
    }

    fn len(&self) -> usize {
        self.chain.len()
    }

    fn repeat_slot(&self, u: usize) -> usize {
        debug_assert!(u >= 1);
        self.len() + u
    }
}

impl SweepSpace for DedupStringSpace<'_> {
    fn num_slots(&self) -> usize {
        2 * self.len() + 1
    }

    fn initial_slot(&self) -> usize {
        0
    }

    fn final_slots(&self) -> Vec<usize> {
        if self.len() == 0 {
            vec![0]
        } else {
            vec![self.len(), self.repeat_slot(self.len())]
        }
    }

    fn omega_row(&self, slot: usize) -> usize {
        let u = if slot <= self.len() {
            slot
        } else {
            slot - self.len()
        };
        self.chain.base_state(u)
    }

    fn label_transitions(&self, slot: usize, f: &mut dyn FnMut(usize, usize, Option<usize>)) {
        let len = self.len();
        let labels = self.chain.labels();
        if slot <= len {
            // Epsilon twin of prefix u: any label is an emission; only the
            // next target label stays on the target.
            let u = slot;
            if u < len {
                f(labels[u], self.repeat_slot(u + 1), Some(labels[u]));
            }
        } else {
            let u = slot - len;
            // Repeat of the label just emitted collapses silently.
            f(labels[u - 1], slot, None);
            // A different label advances the target; an equal one would be
            // a repeat, so advancing requires inequality.
            if u < len && labels[u] != labels[u - 1] {
                f(labels[u], self.repeat_slot(u + 1), Some(labels[u]));
            }
        }
    }

    fn eps_dest(&self, slot: usize) -> usize {
        if slot <= self.len() {
            slot
        } else {
            slot - self.len()
        }
    }
}

/// Number of reachable slots of the reduced twin construction, by forward
/// closure over one representative alignment topology. Exposed for the
/// bound checks: reachability never exceeds `2 * |Q_A| * |Q_C|`.
pub fn reachable_reduced_states(
    lattice: &crate::alignment::AlignmentLattice,
    ctx: &ContextDependency,
) -> usize {
    // Breadth-first over (alignment state, slot) pairs on the implicit
    // twin graph.
    let space: Box<dyn SweepSpace + '_> = if ctx.order() == 0 {
        Box::new(crate::inference::FullSpace { ctx })
    } else {
        Box::new(DedupFullSpace::new(ctx))
    };
    let space = space.as_ref();
    let slots = space.num_slots();
    let index = |qa: usize, slot: usize| qa * slots + slot;
    let mut seen = vec![false; lattice.num_states() * slots];
    let mut queue = std::collections::VecDeque::new();
    let start = index(lattice.initial(), space.initial_slot());
    seen[start] = true;
    queue.push_back((lattice.initial(), space.initial_slot()));
    let mut count = 0;
    while let Some((qa, slot)) = queue.pop_front() {
        count += 1;
        if let Some(succ) = lattice.label_successor(qa) {
            space.label_transitions(slot, &mut |_, dest, _| {
                if !seen[index(succ, dest)] {
                    seen[index(succ, dest)] = true;
                    queue.push_back((succ, dest));
                }
            });
        }
        if let Some(succ) = lattice.epsilon_successor(qa) {
            let dest = space.eps_dest(slot);
            if !seen[index(succ, dest)] {
                seen[index(succ, dest)] = true;
                queue.push_back((succ, dest));
            }
        }
    }
    count
}
