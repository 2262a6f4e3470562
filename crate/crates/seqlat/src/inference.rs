//! Vectorized shortest distance, losses, gradients, and max-path decoding.
//!
//! Every computation here is a sweep over the alignment states in
//! topological order, carrying one weight vector per state. What the vector
//! indexes depends on the pass:
//!
//! - denominators and decoding index the full set of context states, with
//!   label flow routed through the blockwise kernel in
//!   [`crate::context::ContextDependency::next_context_vectorized`];
//! - numerators index the chain of target-prefix states (the context
//!   intersected with the target string), looking weights up through the
//!   chain's base-state mapping;
//! - dedup-mode passes carry an extra twin per state recording whether the
//!   last consumed label may still be collapsed (see [`crate::dedup`]).
//!
//! Gradients come from explicit forward-backward occupation counts rather
//! than reverse-mode through the recursion: for every arc,
//! `gamma = exp(-(alpha[src] + w + beta[dst] - total))`, and the loss
//! gradient with respect to a raw score is the difference of denominator
//! and numerator occupations pushed through the normalization Jacobian.
//! Locally normalized models have a constant unit normalizer, so their
//! denominator pass (value and gradient) is skipped outright.

use crate::alignment::AlignmentLattice;
use crate::context::StringContext;
use crate::dedup::{DedupFullSpace, DedupStringSpace};
use crate::oracle::LatticeMode;
use crate::semiring::{Semiring, Weight};
use crate::weights::{MaskKind, OmegaTable, WeightFunction};
use crate::{Error, Result};
use ndarray::Array2;
use std::collections::BTreeMap;

/// Per-alignment-state forward weight vectors.
#[derive(Debug, Clone)]
pub struct ForwardTable {
    pub per_state: Vec<Vec<Weight>>,
}

/// Numerator, denominator, and their difference, all in the log domain.
#[derive(Debug, Clone, Copy)]
pub struct LossResult {
    pub numerator: Weight,
    pub denominator: Weight,
    pub loss: f64,
}

/// Arc occupation probabilities from a forward-backward pass: one
/// `(slots, vocab + 1)` matrix per alignment state, epsilon in the last
/// column. Slots are context states for plain full-lattice passes.
#[derive(Debug, Clone)]
pub struct SweepPosteriors {
    pub gamma: Vec<Array2<f64>>,
    pub total: Weight,
}

/// Analytic gradients for one sequence.
pub struct LossGradients {
    pub loss: LossResult,
    /// Same tensor layout as the weight function.
    pub wf_grad: WeightFunction,
    /// Gradient with respect to the encoder activations.
    pub d_h: Array2<f64>,
}

// ---------------------------------------------------------------------------
// Sweep state spaces
// ---------------------------------------------------------------------------

/// The per-alignment-state vector layout of one pass: how many slots, which
/// context row scores each slot, and where label/epsilon transitions lead.
/// Implementations must enumerate transitions in a fixed order (ascending
/// slot, then ascending label) so that tie-breaking and reductions are
/// deterministic.
pub(crate) trait SweepSpace {
    fn num_slots(&self) -> usize;
    fn initial_slot(&self) -> usize;
    fn final_slots(&self) -> Vec<usize>;
    /// Context row used for weight lookups at this slot.
    fn omega_row(&self, slot: usize) -> usize;
    /// Enumerate `(label, destination slot, emitted label)` transitions.
    fn label_transitions(&self, slot: usize, f: &mut dyn FnMut(usize, usize, Option<usize>));
    /// Destination slot of the epsilon transition (the alignment state
    /// advances; the slot may change, e.g. dedup twins reset).
    fn eps_dest(&self, slot: usize) -> usize;

    /// One step of label flow: returns the contribution to the label
    /// successor's vector. The default scatters transition by transition;
    /// spaces with structure override it.
    fn label_flow(&self, kind: Semiring, alpha: &[Weight], omega: &Array2<Weight>) -> Vec<Weight> {
        let mut out = vec![kind.zero(); self.num_slots()];
        for slot in 0..self.num_slots() {
            if kind.is_zero(alpha[slot]) {
                continue;
            }
            let row = self.omega_row(slot);
            self.label_transitions(slot, &mut |y, dest, _| {
                out[dest] = kind.plus(out[dest], kind.times(alpha[slot], omega[[row, y]]));
            });
        }
        out
    }
}

/// Full context space: one slot per context state. Label flow uses the
/// blockwise vectorized kernel.
pub(crate) struct FullSpace<'a> {
    pub ctx: &'a crate::context::ContextDependency,
}

impl SweepSpace for FullSpace<'_> {
    fn num_slots(&self) -> usize {
        self.ctx.num_states()
    }

    fn initial_slot(&self) -> usize {
        self.ctx.initial()
    }

    fn final_slots(&self) -> Vec<usize> {
        (0..self.ctx.num_states()).collect()
    }

    fn omega_row(&self, slot: usize) -> usize {
        slot
    }

    fn label_transitions(&self, slot: usize, f: &mut dyn FnMut(usize, usize, Option<usize>)) {
        for y in 0..self.ctx.vocab() {
            f(y, self.ctx.next_state(slot, y), Some(y));
        }
    }

    fn eps_dest(&self, slot: usize) -> usize {
        slot
    }

    fn label_flow(&self, kind: Semiring, alpha: &[Weight], omega: &Array2<Weight>) -> Vec<Weight> {
        let labels = omega.slice(ndarray::s![.., ..self.ctx.vocab()]);
        self.ctx
            .next_context_vectorized(kind, alpha, &labels)
            .expect("dimensions validated at sweep entry")
    }
}

/// Target-string chain: slot `u` has consumed `u` labels of the target.
pub(crate) struct StringSpace<'a> {
    pub chain: &'a StringContext,
}

impl SweepSpace for StringSpace<'_> {
    fn num_slots(&self) -> usize {
        self.chain.len() + 1
    }

    fn initial_slot(&self) -> usize {
        0
    }

    fn final_slots(&self) -> Vec<usize> {
        vec![self.chain.len()]
    }

    fn omega_row(&self, slot: usize) -> usize {
        self.chain.base_state(slot)
    }

    fn label_transitions(&self, slot: usize, f: &mut dyn FnMut(usize, usize, Option<usize>)) {
        if slot < self.chain.len() {
            let y = self.chain.labels()[slot];
            f(y, slot + 1, Some(y));
        }
    }

    fn eps_dest(&self, slot: usize) -> usize {
        slot
    }
}

// ---------------------------------------------------------------------------
// Sweeps
// ---------------------------------------------------------------------------

fn space_for_denominator<'a>(omega: &'a OmegaTable, mode: LatticeMode) -> Box<dyn SweepSpace + 'a> {
    match mode {
        LatticeMode::Plain => Box::new(FullSpace {
            ctx: omega.context(),
        }),
        // An order-0 context cannot tell dedup twins apart, and arc weights
        // ignore the twin, so the twin axis collapses: the plain space
        // computes the same total (see the dedup module notes).
        LatticeMode::Dedup if omega.context().order() == 0 => Box::new(FullSpace {
            ctx: omega.context(),
        }),
        LatticeMode::Dedup => Box::new(DedupFullSpace::new(omega.context())),
    }
}

fn mask_for(lattice: &AlignmentLattice, state: usize) -> Option<MaskKind> {
    MaskKind::new(
        lattice.label_successor(state).is_some(),
        lattice.epsilon_successor(state).is_some(),
    )
}

fn forward_sweep(
    lattice: &AlignmentLattice,
    omega: &OmegaTable,
    space: &dyn SweepSpace,
    kind: Semiring,
) -> Result<(Weight, ForwardTable)> {
    let slots = space.num_slots();
    let mut tables = vec![vec![kind.zero(); slots]; lattice.num_states()];
    tables[lattice.initial()][space.initial_slot()] = kind.one();
    for qa in lattice.states_topo() {
        let Some(mask) = mask_for(lattice, qa) else {
            continue;
        };
        if tables[qa].iter().all(|&w| kind.is_zero(w)) {
            continue;
        }
        let row = omega.feature_row(lattice.feature_index(qa))?;
        let w = omega.normalized(row, mask)?;
        if let Some(succ) = lattice.label_successor(qa) {
            let flow = space.label_flow(kind, &tables[qa], &w);
            for (dst, f) in tables[succ].iter_mut().zip(flow) {
                *dst = kind.plus(*dst, f);
            }
        }
        if let Some(succ) = lattice.epsilon_successor(qa) {
            let v = omega.vocab();
            let mut flow = vec![kind.zero(); slots];
            for slot in 0..slots {
                if kind.is_zero(tables[qa][slot]) {
                    continue;
                }
                let dest = space.eps_dest(slot);
                let contrib = kind.times(tables[qa][slot], w[[space.omega_row(slot), v]]);
                flow[dest] = kind.plus(flow[dest], contrib);
            }
            for (dst, f) in tables[succ].iter_mut().zip(flow) {
                *dst = kind.plus(*dst, f);
            }
        }
    }
    let mut total = kind.zero();
    for qa in lattice.states_topo() {
        if lattice.is_final(qa) {
            for slot in space.final_slots() {
                total = kind.plus(total, tables[qa][slot]);
            }
        }
    }
    Ok((total, ForwardTable { per_state: tables }))
}

fn backward_sweep(
    lattice: &AlignmentLattice,
    omega: &OmegaTable,
    space: &dyn SweepSpace,
    kind: Semiring,
) -> Result<Vec<Vec<Weight>>> {
    let slots = space.num_slots();
    let mut tables = vec![vec![kind.zero(); slots]; lattice.num_states()];
    for qa in lattice.states_topo() {
        if lattice.is_final(qa) {
            for slot in space.final_slots() {
                tables[qa][slot] = kind.one();
            }
        }
    }
    for qa in lattice.states_topo().rev() {
        let Some(mask) = mask_for(lattice, qa) else {
            continue;
        };
        let row = omega.feature_row(lattice.feature_index(qa))?;
        let w = omega.normalized(row, mask)?;
        let v = omega.vocab();
        if let Some(succ) = lattice.label_successor(qa) {
            let (head, tail) = tables.split_at_mut(succ);
            let beta_succ = &tail[0];
            let beta_here = &mut head[qa];
            for slot in 0..slots {
                let omega_row = space.omega_row(slot);
                space.label_transitions(slot, &mut |y, dest, _| {
                    beta_here[slot] = kind.plus(
                        beta_here[slot],
                        kind.times(w[[omega_row, y]], beta_succ[dest]),
                    );
                });
            }
        }
        if let Some(succ) = lattice.epsilon_successor(qa) {
            let (head, tail) = tables.split_at_mut(succ);
            let beta_succ = &tail[0];
            let beta_here = &mut head[qa];
            for slot in 0..slots {
                let contrib = kind.times(
                    w[[space.omega_row(slot), v]],
                    beta_succ[space.eps_dest(slot)],
                );
                beta_here[slot] = kind.plus(beta_here[slot], contrib);
            }
        }
    }
    Ok(tables)
}

/// Forward-backward arc occupations for one space, in the log semiring.
fn sweep_posteriors(
    lattice: &AlignmentLattice,
    omega: &OmegaTable,
    space: &dyn SweepSpace,
) -> Result<SweepPosteriors> {
    let kind = Semiring::Log;
    let (total, fwd) = forward_sweep(lattice, omega, space, kind)?;
    if total == f64::INFINITY {
        return Err(Error::EmptyLattice);
    }
    let bwd = backward_sweep(lattice, omega, space, kind)?;
    let slots = space.num_slots();
    let v = omega.vocab();
    let mut gamma: Vec<Array2<f64>> = lattice
        .states_topo()
        .map(|_| Array2::zeros((slots, v + 1)))
        .collect();
    for qa in lattice.states_topo() {
        let Some(mask) = mask_for(lattice, qa) else {
            continue;
        };
        let row = omega.feature_row(lattice.feature_index(qa))?;
        let w = omega.normalized(row, mask)?;
        let alpha = &fwd.per_state[qa];
        if let Some(succ) = lattice.label_successor(qa) {
            let beta = &bwd[succ];
            for slot in 0..slots {
                if alpha[slot] == f64::INFINITY {
                    continue;
                }
                let omega_row = space.omega_row(slot);
                let g = &mut gamma[qa];
                space.label_transitions(slot, &mut |y, dest, _| {
                    let occupancy = alpha[slot] + w[[omega_row, y]] + beta[dest] - total;
                    if occupancy.is_finite() {
                        g[[slot, y]] += (-occupancy).exp();
                    }
                });
            }
        }
        if let Some(succ) = lattice.epsilon_successor(qa) {
            let beta = &bwd[succ];
            for slot in 0..slots {
                if alpha[slot] == f64::INFINITY {
                    continue;
                }
                let occupancy =
                    alpha[slot] + w[[space.omega_row(slot), v]] + beta[space.eps_dest(slot)]
                        - total;
                if occupancy.is_finite() {
                    gamma[qa][[slot, v]] += (-occupancy).exp();
                }
            }
        }
    }
    Ok(SweepPosteriors { gamma, total })
}

// ---------------------------------------------------------------------------
// Public operations
// ---------------------------------------------------------------------------

/// Total lattice weight under `tag`, plus the forward table. This is the
/// global normalizer when `tag` is the log semiring.
pub fn shortest_distance(
    lattice: &AlignmentLattice,
    omega: &OmegaTable,
    mode: LatticeMode,
    tag: Semiring,
) -> Result<(Weight, ForwardTable)> {
    let space = space_for_denominator(omega, mode);
    forward_sweep(lattice, omega, space.as_ref(), tag)
}

/// Weight of the paths emitting exactly `target`: the same sweep with the
/// context replaced by its intersection with the target string. An
/// unemittable target yields the zero element, not an error.
pub fn numerator(
    lattice: &AlignmentLattice,
    omega: &OmegaTable,
    mode: LatticeMode,
    target: &[usize],
    tag: Semiring,
) -> Result<Weight> {
    let chain = omega.context().intersect_string(target)?;
    let (total, _) = match mode {
        LatticeMode::Plain => {
            let space = StringSpace { chain: &chain };
            forward_sweep(lattice, omega, &space, tag)?
        }
        LatticeMode::Dedup => {
            let space = DedupStringSpace::new(&chain);
            forward_sweep(lattice, omega, &space, tag)?
        }
    };
    Ok(total)
}

/// Negative log conditional likelihood of `target`. For locally normalized
/// weight functions the denominator is identically zero and its pass is
/// skipped.
pub fn loss(
    lattice: &AlignmentLattice,
    omega: &OmegaTable,
    mode: LatticeMode,
    target: &[usize],
) -> Result<LossResult> {
    let num = numerator(lattice, omega, mode, target, Semiring::Log)?;
    if num == f64::INFINITY {
        return Err(Error::UnreachableTarget);
    }
    let den = if omega.normalization().is_local() {
        0.0
    } else {
        shortest_distance(lattice, omega, mode, Semiring::Log)?.0
    };
    Ok(LossResult {
        numerator: num,
        denominator: den,
        loss: num - den,
    })
}

/// Arc occupation probabilities of the full lattice (the denominator's
/// forward-backward statistics). Slots are context states in plain mode.
pub fn posteriors(
    lattice: &AlignmentLattice,
    omega: &OmegaTable,
    mode: LatticeMode,
) -> Result<SweepPosteriors> {
    let space = space_for_denominator(omega, mode);
    sweep_posteriors(lattice, omega, space.as_ref())
}

/// Arc occupations of the target-restricted lattice.
pub fn string_posteriors(
    lattice: &AlignmentLattice,
    omega: &OmegaTable,
    mode: LatticeMode,
    target: &[usize],
) -> Result<SweepPosteriors> {
    let chain = omega.context().intersect_string(target)?;
    match mode {
        LatticeMode::Plain => {
            let space = StringSpace { chain: &chain };
            sweep_posteriors(lattice, omega, &space)
        }
        LatticeMode::Dedup => {
            let space = DedupStringSpace::new(&chain);
            sweep_posteriors(lattice, omega, &space)
        }
    }
}

#[derive(Clone, Copy)]
struct BackPtr {
    prev_state: usize,
    prev_slot: usize,
    /// Alignment label consumed by the arc (`None` for epsilon).
    label: Option<usize>,
    /// Label the arc emits after any dedup mapping.
    emitted: Option<usize>,
}

/// Tropical-semiring best path with backpointers. Returns the emitted label
/// sequence (epsilon removed; dedup-collapsed in dedup mode) and the path
/// weight. Exact ties keep the first candidate in processing order, i.e.
/// the lowest (source alignment state, source slot, label).
pub fn decode_max_path(
    lattice: &AlignmentLattice,
    omega: &OmegaTable,
    mode: LatticeMode,
) -> Result<(Vec<usize>, Weight)> {
    let space = space_for_denominator(omega, mode);
    let space = space.as_ref();
    let slots = space.num_slots();
    let v = omega.vocab();
    let inf = f64::INFINITY;
    let mut dist = vec![vec![inf; slots]; lattice.num_states()];
    let mut back: Vec<Vec<Option<BackPtr>>> = vec![vec![None; slots]; lattice.num_states()];
    dist[lattice.initial()][space.initial_slot()] = 0.0;
    for qa in lattice.states_topo() {
        let Some(mask) = mask_for(lattice, qa) else {
            continue;
        };
        let row = omega.feature_row(lattice.feature_index(qa))?;
        let w = omega.normalized(row, mask)?;
        if let Some(succ) = lattice.label_successor(qa) {
            for slot in 0..slots {
                if !dist[qa][slot].is_finite() {
                    continue;
                }
                let base = dist[qa][slot];
                let omega_row = space.omega_row(slot);
                let mut updates: Vec<(usize, usize, f64, Option<usize>)> = Vec::new();
                space.label_transitions(slot, &mut |y, dest, emitted| {
                    updates.push((y, dest, base + w[[omega_row, y]], emitted));
                });
                for (y, dest, cand, emitted) in updates {
                    if cand < dist[succ][dest] {
                        dist[succ][dest] = cand;
                        back[succ][dest] = Some(BackPtr {
                            prev_state: qa,
                            prev_slot: slot,
                            label: Some(y),
                            emitted,
                        });
                    }
                }
            }
        }
        if let Some(succ) = lattice.epsilon_successor(qa) {
            for slot in 0..slots {
                if !dist[qa][slot].is_finite() {
                    continue;
                }
                let dest = space.eps_dest(slot);
                let cand = dist[qa][slot] + w[[space.omega_row(slot), v]];
                if cand < dist[succ][dest] {
                    dist[succ][dest] = cand;
                    back[succ][dest] = Some(BackPtr {
                        prev_state: qa,
                        prev_slot: slot,
                        label: None,
                        emitted: None,
                    });
                }
            }
        }
    }
    let mut best = inf;
    let mut at: Option<(usize, usize)> = None;
    for qa in lattice.states_topo() {
        if !lattice.is_final(qa) {
            continue;
        }
        for slot in space.final_slots() {
            if dist[qa][slot] < best {
                best = dist[qa][slot];
                at = Some((qa, slot));
            }
        }
    }
    let mut emitted_rev = Vec::new();
    let mut labels_rev: Vec<Option<usize>> = Vec::new();
    let mut cursor = at;
    while let Some((qa, slot)) = cursor {
        match back[qa][slot] {
            Some(bp) => {
                if let Some(y) = bp.emitted {
                    emitted_rev.push(y);
                }
                labels_rev.push(bp.label);
                cursor = Some((bp.prev_state, bp.prev_slot));
            }
            None => break,
        }
    }
    emitted_rev.reverse();
    // The order-0 dedup denominator runs on the plain space, whose arcs
    // emit labels verbatim; apply the collapse to the raw alignment labels
    // instead.
    if mode == LatticeMode::Dedup && omega.context().order() == 0 {
        labels_rev.reverse();
        return Ok((crate::dedup::ctc_collapse(&labels_rev), best));
    }
    Ok((emitted_rev, best))
}

// ---------------------------------------------------------------------------
// Gradients
// ---------------------------------------------------------------------------

/// Aggregate slot-level occupations into per-context-row matrices, bucketed
/// by (feature row, arc mask) so the normalization Jacobian can be applied
/// once per bucket.
fn accumulate_by_row(
    lattice: &AlignmentLattice,
    omega: &OmegaTable,
    space: &dyn SweepSpace,
    post: &SweepPosteriors,
    sign: f64,
    buckets: &mut BTreeMap<(usize, MaskKind), Array2<f64>>,
) -> Result<()> {
    let nc = omega.context().num_states();
    let v = omega.vocab();
    for qa in lattice.states_topo() {
        let Some(mask) = mask_for(lattice, qa) else {
            continue;
        };
        let row = omega.feature_row(lattice.feature_index(qa))?;
        let entry = buckets
            .entry((row, mask))
            .or_insert_with(|| Array2::zeros((nc, v + 1)));
        let g = &post.gamma[qa];
        for slot in 0..space.num_slots() {
            let omega_row = space.omega_row(slot);
            for y in 0..=v {
                let occ = g[[slot, y]];
                if occ != 0.0 {
                    entry[[omega_row, y]] += sign * occ;
                }
            }
        }
    }
    Ok(())
}

/// Loss and analytic gradients for every weight-function parameter, plus
/// the gradient with respect to the encoder activations.
pub fn loss_gradients(
    lattice: &AlignmentLattice,
    omega: &OmegaTable,
    mode: LatticeMode,
    target: &[usize],
    wf: &WeightFunction,
    prepared: &crate::weights::PreparedWeights,
    h: &Array2<f64>,
) -> Result<LossGradients> {
    let chain = omega.context().intersect_string(target)?;
    let mut buckets: BTreeMap<(usize, MaskKind), Array2<f64>> = BTreeMap::new();

    // Numerator occupations enter with negative sign.
    let num_total = match mode {
        LatticeMode::Plain => {
            let space = StringSpace { chain: &chain };
            let post = sweep_posteriors(lattice, omega, &space).map_err(|e| match e {
                Error::EmptyLattice => Error::UnreachableTarget,
                other => other,
            })?;
            accumulate_by_row(lattice, omega, &space, &post, -1.0, &mut buckets)?;
            post.total
        }
        LatticeMode::Dedup => {
            let space = DedupStringSpace::new(&chain);
            let post = sweep_posteriors(lattice, omega, &space).map_err(|e| match e {
                Error::EmptyLattice => Error::UnreachableTarget,
                other => other,
            })?;
            accumulate_by_row(lattice, omega, &space, &post, -1.0, &mut buckets)?;
            post.total
        }
    };

    // Denominator occupations (positive sign) only matter for globally
    // normalized models: a unit normalizer has zero gradient.
    let den_total = if omega.normalization().is_local() {
        0.0
    } else {
        let space = space_for_denominator(omega, mode);
        let post = sweep_posteriors(lattice, omega, space.as_ref())?;
        accumulate_by_row(lattice, omega, space.as_ref(), &post, 1.0, &mut buckets)?;
        post.total
    };

    // Push the occupation differences through the normalization Jacobian,
    // summing into one score-gradient matrix per feature row.
    let v = omega.vocab();
    let nc = omega.context().num_states();
    let mut score_grads: BTreeMap<usize, Array2<f64>> = BTreeMap::new();
    for ((row, mask), g) in &buckets {
        let raw = omega.raw(*row)?;
        let bools = mask.to_bools(v);
        let ds = score_grads
            .entry(*row)
            .or_insert_with(|| Array2::zeros((nc, v + 1)));
        for r in 0..nc {
            let grad_row = crate::weights::score_grad_row(
                omega.normalization(),
                &raw.row(r),
                &bools,
                &g.row(r),
            );
            for y in 0..=v {
                ds[[r, y]] += grad_row[y];
            }
        }
    }

    let mut wf_grad = wf.zeros_like();
    let mut d_h = Array2::zeros(h.raw_dim());
    wf.backward(
        prepared,
        omega.context(),
        h,
        &score_grads,
        &mut wf_grad,
        &mut d_h,
    );

    Ok(LossGradients {
        loss: LossResult {
            numerator: num_total,
            denominator: den_total,
            loss: num_total - den_total,
        },
        wf_grad,
        d_h,
    })
}
