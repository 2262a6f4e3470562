//! Explicit recognition lattices and brute-force path enumeration.
//!
//! This is the ground truth for the vectorized sweeps: the lattice is
//! materialized as a flat arc list (the full product of alignment and
//! context states, with the dedup transducer as a third axis when
//! requested), paths are enumerated depth first, and total weights are
//! recombined from scratch. Deliberately naive; shares the weight-function
//! evaluation with the fast path (both must score the same model) but none
//! of its sweep machinery.

use crate::alignment::AlignmentLattice;
use crate::context::ContextDependency;
use crate::semiring::{Semiring, Weight};
use crate::weights::{MaskKind, OmegaTable};
use crate::{Error, Result};

/// Whether paths emit their labels as-is or through CTC-style collapsing of
/// consecutive repeats.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LatticeMode {
    Plain,
    Dedup,
}

/// One materialized transition. `label` is the consumed alignment label
/// (`None` for epsilon); `output` is what the path emits here after the
/// dedup mapping, which equals `label` in plain mode.
#[derive(Debug, Clone)]
pub struct ExplicitArc {
    pub src: usize,
    pub dst: usize,
    pub label: Option<usize>,
    pub output: Option<usize>,
    pub weight: Weight,
}

/// Fully materialized recognition lattice. States are the complete product
/// space (reachable or not); all final weights are the semiring one.
pub struct ExplicitLattice {
    pub num_states: usize,
    pub initial: usize,
    pub finals: Vec<usize>,
    pub arcs: Vec<ExplicitArc>,
    arcs_from: Vec<Vec<usize>>,
}

/// A successful path through an [`ExplicitLattice`].
#[derive(Debug, Clone)]
pub struct LatticePath {
    pub arcs: Vec<usize>,
    /// Alignment labels along the path, epsilon included.
    pub labels: Vec<Option<usize>>,
    /// Emitted label sequence: epsilon removed, and in dedup mode repeats
    /// collapsed.
    pub emitted: Vec<usize>,
    /// Log-domain path weight (sum of arc weights).
    pub weight: Weight,
}

/// Guard for the explicit product: this module is for desk-scale checks.
const MAX_STATES: usize = 1_000_000;

/// Materialize the recognition lattice for the given model state.
pub fn build_explicit(
    lattice: &AlignmentLattice,
    ctx: &ContextDependency,
    omega: &OmegaTable,
    mode: LatticeMode,
) -> Result<ExplicitLattice> {
    let na = lattice.num_states();
    let nc = ctx.num_states();
    let v = ctx.vocab();
    let dedup_states = match mode {
        LatticeMode::Plain => 1,
        LatticeMode::Dedup => v + 1, // labels plus the reset state
    };
    let num_states = na
        .checked_mul(nc)
        .and_then(|x| x.checked_mul(dedup_states))
        .ok_or_else(|| Error::Overflow("explicit state count".into()))?;
    if num_states > MAX_STATES {
        return Err(Error::SizeGuard(format!(
            "{num_states} explicit states exceeds {MAX_STATES}"
        )));
    }

    // Plain: index = qa * nc + qc.
    // Dedup: index = (qa * (v + 1) + qd) * nc + qc, where qd == v is the
    // "no pending label" state entered at the start and after epsilon.
    let plain_index = |qa: usize, qc: usize| qa * nc + qc;
    let dedup_index = |qa: usize, qd: usize, qc: usize| (qa * (v + 1) + qd) * nc + qc;

    let initial = match mode {
        LatticeMode::Plain => plain_index(lattice.initial(), ctx.initial()),
        LatticeMode::Dedup => dedup_index(lattice.initial(), v, ctx.initial()),
    };
    let mut finals = Vec::new();
    for qa in lattice.states_topo() {
        if !lattice.is_final(qa) {
            continue;
        }
        match mode {
            LatticeMode::Plain => {
                for qc in 0..nc {
                    finals.push(plain_index(qa, qc));
                }
            }
            LatticeMode::Dedup => {
                for qd in 0..=v {
                    for qc in 0..nc {
                        finals.push(dedup_index(qa, qd, qc));
                    }
                }
            }
        }
    }

    let mut arcs = Vec::new();
    for qa in lattice.states_topo() {
        let label_succ = lattice.label_successor(qa);
        let eps_succ = lattice.epsilon_successor(qa);
        let Some(mask) = MaskKind::new(label_succ.is_some(), eps_succ.is_some()) else {
            continue;
        };
        let row = omega.feature_row(lattice.feature_index(qa))?;
        let w = omega.normalized(row, mask)?;
        match mode {
            LatticeMode::Plain => {
                if let Some(qa2) = label_succ {
                    for qc in 0..nc {
                        for y in 0..v {
                            arcs.push(ExplicitArc {
                                src: plain_index(qa, qc),
                                dst: plain_index(qa2, ctx.next_state(qc, y)),
                                label: Some(y),
                                output: Some(y),
                                weight: w[[qc, y]],
                            });
                        }
                    }
                }
                if let Some(qa2) = eps_succ {
                    for qc in 0..nc {
                        arcs.push(ExplicitArc {
                            src: plain_index(qa, qc),
                            dst: plain_index(qa2, qc),
                            label: None,
                            output: None,
                            weight: w[[qc, v]],
                        });
                    }
                }
            }
            LatticeMode::Dedup => {
                let transducer = crate::dedup::DedupTransducer::new(v);
                for qd in 0..=v {
                    if let Some(qa2) = label_succ {
                        for qc in 0..nc {
                            for y in 0..v {
                                let (qd2, output) = transducer.step(qd, Some(y));
                                // The context consumes the transducer's
                                // output, so it holds its place on repeats.
                                let qc2 = match output {
                                    Some(y) => ctx.next_state(qc, y),
                                    None => qc,
                                };
                                arcs.push(ExplicitArc {
                                    src: dedup_index(qa, qd, qc),
                                    dst: dedup_index(qa2, qd2, qc2),
                                    label: Some(y),
                                    output,
                                    weight: w[[qc, y]],
                                });
                            }
                        }
                    }
                    if let Some(qa2) = eps_succ {
                        for qc in 0..nc {
                            let (qd2, _) = transducer.step(qd, None);
                            arcs.push(ExplicitArc {
                                src: dedup_index(qa, qd, qc),
                                dst: dedup_index(qa2, qd2, qc),
                                label: None,
                                output: None,
                                weight: w[[qc, v]],
                            });
                        }
                    }
                }
            }
        }
    }

    let mut arcs_from = vec![Vec::new(); num_states];
    for (i, arc) in arcs.iter().enumerate() {
        arcs_from[arc.src].push(i);
    }
    Ok(ExplicitLattice {
        num_states,
        initial,
        finals,
        arcs,
        arcs_from,
    })
}

impl ExplicitLattice {
    /// All successful paths, depth first by arc index. Errors out once more
    /// than `cap` paths have been found.
    pub fn enumerate_paths(&self, cap: usize) -> Result<Vec<LatticePath>> {
        let final_set: std::collections::HashSet<usize> = self.finals.iter().copied().collect();
        let mut paths = Vec::new();
        let mut stack: Vec<usize> = Vec::new();
        self.dfs(self.initial, &final_set, &mut stack, &mut paths, cap)?;
        Ok(paths)
    }

    fn dfs(
        &self,
        state: usize,
        finals: &std::collections::HashSet<usize>,
        stack: &mut Vec<usize>,
        paths: &mut Vec<LatticePath>,
        cap: usize,
    ) -> Result<()> {
        if finals.contains(&state) {
            if paths.len() >= cap {
                return Err(Error::PathCap { cap });
            }
            let labels: Vec<Option<usize>> = stack.iter().map(|&i| self.arcs[i].label).collect();
            let emitted: Vec<usize> = stack.iter().filter_map(|&i| self.arcs[i].output).collect();
            let weight = stack.iter().map(|&i| self.arcs[i].weight).sum();
            paths.push(LatticePath {
                arcs: stack.clone(),
                labels,
                emitted,
                weight,
            });
        }
        for &i in &self.arcs_from[state] {
            stack.push(i);
            self.dfs(self.arcs[i].dst, finals, stack, paths, cap)?;
            stack.pop();
        }
        Ok(())
    }

    /// Total lattice weight by path enumeration: the semiring sum over all
    /// successful path weights.
    pub fn weight_by_enumeration(&self, tag: Semiring, cap: usize) -> Result<Weight> {
        let paths = self.enumerate_paths(cap)?;
        Ok(combine_paths(tag, paths.iter().map(|p| p.weight)))
    }

    /// Total lattice weight by a scalar dynamic program over the arc list in
    /// state order. Independent of the enumeration route; usable when the
    /// path count is too large to enumerate.
    pub fn weight_by_dp(&self, tag: Semiring) -> Weight {
        let mut dist = vec![tag.zero(); self.num_states];
        dist[self.initial] = tag.one();
        for state in 0..self.num_states {
            if tag.is_zero(dist[state]) && state != self.initial {
                continue;
            }
            for &i in &self.arcs_from[state] {
                let arc = &self.arcs[i];
                dist[arc.dst] = tag.plus(dist[arc.dst], tag.times(dist[state], arc.weight));
            }
        }
        let mut total = tag.zero();
        for &f in &self.finals {
            total = tag.plus(total, dist[f]);
        }
        total
    }

    /// Restriction to one emitted string: the semiring sum over successful
    /// paths whose emitted labels equal `target`.
    pub fn string_weight(&self, tag: Semiring, target: &[usize], cap: usize) -> Result<Weight> {
        let paths = self.enumerate_paths(cap)?;
        Ok(combine_paths(
            tag,
            paths
                .iter()
                .filter(|p| p.emitted == target)
                .map(|p| p.weight),
        ))
    }

    /// Minimum-weight path by scalar Viterbi over the arc list, with the
    /// first-seen arc winning exact ties (arc order is fixed, so this is
    /// deterministic). Returns the emitted labels and the tropical weight.
    pub fn best_path_by_dp(&self) -> (Vec<usize>, Weight) {
        let mut dist = vec![f64::INFINITY; self.num_states];
        let mut back: Vec<Option<usize>> = vec![None; self.num_states];
        dist[self.initial] = 0.0;
        for state in 0..self.num_states {
            if !dist[state].is_finite() {
                continue; // unreachable, or reachable only through masked arcs
            }
            for &i in &self.arcs_from[state] {
                let arc = &self.arcs[i];
                let cand = dist[state] + arc.weight;
                if cand < dist[arc.dst] {
                    dist[arc.dst] = cand;
                    back[arc.dst] = Some(i);
                }
            }
        }
        let mut best_final = None;
        let mut best = f64::INFINITY;
        for &f in &self.finals {
            if dist[f] < best {
                best = dist[f];
                best_final = Some(f);
            }
        }
        let mut emitted_rev = Vec::new();
        let mut cursor = best_final;
        while let Some(state) = cursor {
            match back[state] {
                Some(i) => {
                    if let Some(y) = self.arcs[i].output {
                        emitted_rev.push(y);
                    }
                    cursor = Some(self.arcs[i].src);
                }
                None => break,
            }
        }
        emitted_rev.reverse();
        (emitted_rev, best)
    }

    /// Number of distinct states reachable from the initial state.
    pub fn reachable_states(&self) -> usize {
        let mut seen = vec![false; self.num_states];
        let mut queue = std::collections::VecDeque::new();
        seen[self.initial] = true;
        queue.push_back(self.initial);
        let mut count = 0;
        while let Some(s) = queue.pop_front() {
            count += 1;
            for &i in &self.arcs_from[s] {
                let d = self.arcs[i].dst;
                if !seen[d] {
                    seen[d] = true;
                    queue.push_back(d);
                }
            }
        }
        count
    }

    /// Text dump: one `src dst label weight` line per arc in arc order,
    /// then one `final state` line per final state. The format is fixed and
    /// covered by a golden test.
    pub fn dump(&self) -> String {
        use std::fmt::Write;
        let mut out = String::new();
        for arc in &self.arcs {
            let label = match arc.label {
                Some(y) => y.to_string(),
                None => "eps".to_string(),
            };
            // Canonicalize -0.0 so the text form is stable.
            let w = arc.weight + 0.0;
            writeln!(out, "{} {} {} {:.12e}", arc.src, arc.dst, label, w).unwrap();
        }
        for &f in &self.finals {
            writeln!(out, "final {f}").unwrap();
        }
        out
    }
}

fn combine_paths(tag: Semiring, weights: impl Iterator<Item = Weight>) -> Weight {
    match tag {
        // Path weights are stored in the log domain; the real-semiring view
        // of a path is exp(-w).
        Semiring::Real => weights.map(|w| (-w).exp()).sum(),
        Semiring::Log => {
            let mut acc = f64::INFINITY;
            for w in weights {
                acc = Semiring::Log.plus(acc, w);
            }
            acc
        }
        Semiring::Tropical => weights.fold(f64::INFINITY, f64::min),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::weights::{Normalization, PreparedWeights, WeightFunction};
    use ndarray::Array2;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    pub(crate) struct Fixture {
        pub ctx: ContextDependency,
        pub wf: WeightFunction,
        pub prepared: PreparedWeights,
        pub h: Array2<f64>,
    }

    impl Fixture {
        pub fn new(order: usize, vocab: usize, frames: usize, seed: u64) -> Self {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let ctx = ContextDependency::new(order, vocab).unwrap();
            let wf = WeightFunction::unshared(&mut rng, ctx.num_states(), vocab, 4);
            let prepared = wf.prepare(&ctx).unwrap();
            let h = Array2::from_shape_fn((frames.max(1), 4), |_| rng.gen_range(-1.0..1.0));
            Fixture {
                ctx,
                wf,
                prepared,
                h,
            }
        }

        pub fn zero_params(mut self) -> Self {
            let zeros = vec![0.0; self.wf.flatten().len()];
            self.wf.load_flat(&zeros).unwrap();
            self.prepared = self.wf.prepare(&self.ctx).unwrap();
            self
        }

        pub fn omega(&self, norm: Normalization) -> OmegaTable<'_> {
            OmegaTable::new(&self.wf, &self.prepared, &self.ctx, &self.h, norm)
        }
    }

    #[test]
    fn overview_example_has_35_states_81_paths_6_alignments() {
        let fx = Fixture::new(2, 2, 4, 42);
        let omega = fx.omega(Normalization::Global);
        let lat = build_explicit(
            &AlignmentLattice::frame(4),
            &fx.ctx,
            &omega,
            LatticeMode::Plain,
        )
        .unwrap();
        assert_eq!(lat.num_states, 35);
        let paths = lat.enumerate_paths(1_000).unwrap();
        assert_eq!(paths.len(), 81);
        let ab = paths.iter().filter(|p| p.emitted == vec![0, 1]).count();
        assert_eq!(ab, 6);
    }

    #[test]
    fn order_zero_frame_product_is_frame_chain() {
        let fx = Fixture::new(0, 2, 3, 1);
        let omega = fx.omega(Normalization::Global);
        let lat = build_explicit(
            &AlignmentLattice::frame(3),
            &fx.ctx,
            &omega,
            LatticeMode::Plain,
        )
        .unwrap();
        assert_eq!(lat.num_states, 4);
    }

    #[test]
    fn label_frame_product_count() {
        let fx = Fixture::new(1, 2, 3, 2);
        let omega = fx.omega(Normalization::Global);
        let lat = build_explicit(
            &AlignmentLattice::label_frame(3, 2).unwrap(),
            &fx.ctx,
            &omega,
            LatticeMode::Plain,
        )
        .unwrap();
        assert_eq!(lat.num_states, 30);
    }

    #[test]
    fn empty_input_has_one_empty_path() {
        let fx = Fixture::new(1, 2, 0, 3);
        let omega = fx.omega(Normalization::Global);
        let lat = build_explicit(
            &AlignmentLattice::frame(0),
            &fx.ctx,
            &omega,
            LatticeMode::Plain,
        )
        .unwrap();
        let paths = lat.enumerate_paths(10).unwrap();
        assert_eq!(paths.len(), 1);
        assert!(paths[0].arcs.is_empty());
        assert_eq!(paths[0].weight, 0.0); // semiring one
    }

    #[test]
    fn label_lattice_path_set() {
        let fx = Fixture::new(1, 2, 1, 4);
        let omega = fx.omega(Normalization::Global);
        let lat = build_explicit(
            &AlignmentLattice::label(2),
            &fx.ctx,
            &omega,
            LatticeMode::Plain,
        )
        .unwrap();
        let paths = lat.enumerate_paths(100).unwrap();
        assert_eq!(paths.len(), 7);
        let mut emitted: Vec<Vec<usize>> = paths.iter().map(|p| p.emitted.clone()).collect();
        emitted.sort();
        emitted.dedup();
        assert_eq!(emitted.len(), 7); // eps, a, b, aa, ab, ba, bb all distinct
    }

    #[test]
    fn unit_weights_give_log_path_count() {
        let fx = Fixture::new(2, 2, 4, 5).zero_params();
        let omega = fx.omega(Normalization::Global);
        let lat = build_explicit(
            &AlignmentLattice::frame(4),
            &fx.ctx,
            &omega,
            LatticeMode::Plain,
        )
        .unwrap();
        let w = lat.weight_by_enumeration(Semiring::Log, 1000).unwrap();
        assert!((w - (-(81.0_f64).ln())).abs() < 1e-12);
        // Tropical total is the min path weight: all paths weigh 0 here.
        let t = lat.weight_by_enumeration(Semiring::Tropical, 1000).unwrap();
        assert_eq!(t, 0.0);
    }

    #[test]
    fn dp_matches_enumeration() {
        for seed in 0..5 {
            let fx = Fixture::new(1, 3, 3, seed);
            for norm in [
                Normalization::Global,
                Normalization::LocalSoftmax,
                Normalization::LocalHat,
            ] {
                let omega = fx.omega(norm);
                for mode in [LatticeMode::Plain, LatticeMode::Dedup] {
                    let lat =
                        build_explicit(&AlignmentLattice::frame(3), &fx.ctx, &omega, mode).unwrap();
                    for tag in [Semiring::Log, Semiring::Tropical] {
                        let a = lat.weight_by_enumeration(tag, 100_000).unwrap();
                        let b = lat.weight_by_dp(tag);
                        assert!(
                            (a - b).abs() < 1e-9 * (1.0 + a.abs()),
                            "seed {seed} {norm:?} {mode:?} {tag:?}: {a} vs {b}"
                        );
                    }
                    // Viterbi DP agrees with the enumerated minimum.
                    let paths = lat.enumerate_paths(100_000).unwrap();
                    let best_enum = paths.iter().map(|p| p.weight).fold(f64::INFINITY, f64::min);
                    let (_, best_dp) = lat.best_path_by_dp();
                    assert!((best_enum - best_dp).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn string_weight_examples() {
        let fx = Fixture::new(2, 2, 2, 6);
        let omega = fx.omega(Normalization::Global);
        let lat = build_explicit(
            &AlignmentLattice::frame(2),
            &fx.ctx,
            &omega,
            LatticeMode::Plain,
        )
        .unwrap();
        // Too-long strings have zero weight.
        assert_eq!(
            lat.string_weight(Semiring::Log, &[0, 1, 0], 1000).unwrap(),
            f64::INFINITY
        );
        // The empty string is carried by the single all-epsilon path.
        let paths = lat.enumerate_paths(1000).unwrap();
        let eps_paths: Vec<_> = paths.iter().filter(|p| p.emitted.is_empty()).collect();
        assert_eq!(eps_paths.len(), 1);
        let w = lat.string_weight(Semiring::Log, &[], 1000).unwrap();
        assert!((w - eps_paths[0].weight).abs() < 1e-12);
    }

    #[test]
    fn string_weights_partition_total_weight() {
        for seed in [0, 1] {
            let fx = Fixture::new(1, 2, 3, seed);
            for mode in [LatticeMode::Plain, LatticeMode::Dedup] {
                let omega = fx.omega(Normalization::Global);
                let lat =
                    build_explicit(&AlignmentLattice::frame(3), &fx.ctx, &omega, mode).unwrap();
                let paths = lat.enumerate_paths(10_000).unwrap();
                let mut strings: Vec<Vec<usize>> =
                    paths.iter().map(|p| p.emitted.clone()).collect();
                strings.sort();
                strings.dedup();
                let total: f64 = strings
                    .iter()
                    .map(|y| lat.string_weight(Semiring::Real, y, 10_000).unwrap())
                    .sum();
                let whole = lat.weight_by_enumeration(Semiring::Real, 10_000).unwrap();
                assert!(
                    (total - whole).abs() < 1e-10 * (1.0 + whole.abs()),
                    "{mode:?}: {total} vs {whole}"
                );
            }
        }
    }

    #[test]
    fn local_normalization_gives_unit_total() {
        for seed in 0..3 {
            let fx = Fixture::new(1, 2, 3, seed);
            for norm in [Normalization::LocalSoftmax, Normalization::LocalHat] {
                let omega = fx.omega(norm);
                let lat = build_explicit(
                    &AlignmentLattice::frame(3),
                    &fx.ctx,
                    &omega,
                    LatticeMode::Plain,
                )
                .unwrap();
                let w = lat.weight_by_enumeration(Semiring::Log, 10_000).unwrap();
                assert!(w.abs() < 1e-9, "{norm:?}: {w}");
            }
        }
    }

    #[test]
    fn path_count_matches_alignment_dp() {
        for (lat_spec, vocab) in [
            (AlignmentLattice::frame(3), 2usize),
            (AlignmentLattice::label_frame(2, 2).unwrap(), 2),
            (AlignmentLattice::label(3), 2),
        ] {
            let fx = Fixture::new(1, vocab, 3, 9);
            let omega = fx.omega(Normalization::Global);
            let lat = build_explicit(&lat_spec, &fx.ctx, &omega, LatticeMode::Plain).unwrap();
            let paths = lat.enumerate_paths(100_000).unwrap();
            assert_eq!(paths.len() as u128, lat_spec.count_paths(vocab).unwrap());
        }
    }

    #[test]
    fn path_cap_is_enforced() {
        let fx = Fixture::new(0, 2, 4, 10);
        let omega = fx.omega(Normalization::Global);
        let lat = build_explicit(
            &AlignmentLattice::frame(4),
            &fx.ctx,
            &omega,
            LatticeMode::Plain,
        )
        .unwrap();
        assert!(matches!(
            lat.enumerate_paths(10),
            Err(Error::PathCap { cap: 10 })
        ));
    }

    #[test]
    fn size_guard_rejects_huge_products() {
        let fx = Fixture::new(5, 4, 1, 11);
        let omega = fx.omega(Normalization::Global);
        // 1365 context states x 2001 alignment states > 1e6.
        let res = build_explicit(
            &AlignmentLattice::frame(2000),
            &fx.ctx,
            &omega,
            LatticeMode::Plain,
        );
        assert!(matches!(res, Err(Error::SizeGuard(_))));
    }

    #[test]
    fn dump_golden_format() {
        let fx = Fixture::new(0, 1, 1, 12).zero_params();
        let omega = fx.omega(Normalization::Global);
        let lat = build_explicit(
            &AlignmentLattice::frame(1),
            &fx.ctx,
            &omega,
            LatticeMode::Plain,
        )
        .unwrap();
        let expected = "0 1 0 0.000000000000e0\n0 1 eps 0.000000000000e0\nfinal 1\n";
        assert_eq!(lat.dump(), expected);
    }
}
