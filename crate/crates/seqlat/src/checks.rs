//! Property suites shared by the `check` subcommand and the acceptance
//! tests: oracle equivalence, the unit-normalizer invariant, gradient
//! correctness, and dedup semantics, each over its full sweep grid with
//! pinned tolerances.

use crate::alignment::AlignmentLattice;
use crate::context::ContextDependency;
use crate::inference;
use crate::oracle::{build_explicit, LatticeMode};
use crate::semiring::Semiring;
use crate::weights::{Normalization, OmegaTable, PreparedWeights, WeightFunction};
use crate::Result;
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Outcome of one suite.
#[derive(Debug, Clone)]
pub struct SuiteReport {
    pub name: &'static str,
    pub passed: bool,
    pub cases: usize,
    pub max_error: f64,
    pub detail: String,
}

impl SuiteReport {
    pub fn line(&self) -> String {
        format!(
            "[{}] {}: {} cases, max error {:.3e}{}",
            if self.passed { "PASS" } else { "FAIL" },
            self.name,
            self.cases,
            self.max_error,
            if self.detail.is_empty() {
                String::new()
            } else {
                format!(" ({})", self.detail)
            }
        )
    }
}

struct Instance {
    ctx: ContextDependency,
    wf: WeightFunction,
    prepared: PreparedWeights,
    h: Array2<f64>,
}

fn instance(order: usize, vocab: usize, frames: usize, which: usize, seed: u64) -> Instance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ctx = ContextDependency::new(order, vocab).expect("desk-scale context");
    let d = 4;
    let wf = match which % 3 {
        0 => WeightFunction::unshared(&mut rng, ctx.num_states(), vocab, d),
        1 => WeightFunction::shared_emb(&mut rng, ctx.num_states(), vocab, d),
        _ => WeightFunction::shared_rnn(&mut rng, vocab, d, 3),
    };
    let prepared = wf.prepare(&ctx).expect("prepare");
    let h = Array2::from_shape_fn((frames.max(1), d), |_| rng.gen_range(-1.0..1.0));
    Instance {
        ctx,
        wf,
        prepared,
        h,
    }
}

impl Instance {
    fn omega(&self, norm: Normalization) -> OmegaTable<'_> {
        OmegaTable::new(&self.wf, &self.prepared, &self.ctx, &self.h, norm)
    }
}

fn sweep_lattices(frames: usize) -> Vec<AlignmentLattice> {
    vec![
        AlignmentLattice::frame(frames),
        AlignmentLattice::label_frame(frames, 2).expect("k >= 1"),
        AlignmentLattice::label(frames),
    ]
}

/// The worked overview example: a two-letter alphabet, second-order
/// context, four frames. Path counts are exact; the vectorized totals must
/// match brute-force enumeration to 1e-9 relative.
pub fn golden_overview_suite(seed: u64, inject_fault: bool) -> Result<SuiteReport> {
    let fx = instance(2, 2, 4, 0, seed);
    let lattice = AlignmentLattice::frame(4);
    let omega = fx.omega(Normalization::Global);
    let mut explicit = build_explicit(&lattice, &fx.ctx, &omega, LatticeMode::Plain)?;
    if inject_fault {
        // Deliberate corruption hook: the oracle and the sweep must now
        // disagree.
        explicit.arcs[0].weight += 1e-3;
    }
    let mut max_err = 0.0f64;
    let mut failures = Vec::new();

    if explicit.num_states != 35 {
        failures.push(format!(
            "expected 35 product states, got {}",
            explicit.num_states
        ));
    }
    let paths = explicit.enumerate_paths(1_000)?;
    if paths.len() != 81 {
        failures.push(format!("expected 81 paths, got {}", paths.len()));
    }
    let ab_paths = paths.iter().filter(|p| p.emitted == vec![0, 1]).count();
    if ab_paths != 6 {
        failures.push(format!("expected 6 alignments of ab, got {ab_paths}"));
    }

    let oracle_den = explicit.weight_by_enumeration(Semiring::Log, 1_000)?;
    let (den, _) =
        inference::shortest_distance(&lattice, &omega, LatticeMode::Plain, Semiring::Log)?;
    let den_err = (den - oracle_den).abs() / (1.0 + oracle_den.abs());
    max_err = max_err.max(den_err);
    if den_err > 1e-9 {
        failures.push(format!("denominator {den} vs oracle {oracle_den}"));
    }

    let oracle_num = explicit.string_weight(Semiring::Log, &[0, 1], 1_000)?;
    let num = inference::numerator(&lattice, &omega, LatticeMode::Plain, &[0, 1], Semiring::Log)?;
    let num_err = (num - oracle_num).abs() / (1.0 + oracle_num.abs());
    max_err = max_err.max(num_err);
    if num_err > 1e-9 {
        failures.push(format!("numerator {num} vs oracle {oracle_num}"));
    }

    Ok(SuiteReport {
        name: "golden-overview",
        passed: failures.is_empty(),
        cases: 5,
        max_error: max_err,
        detail: failures.join("; "),
    })
}

/// Unit-normalizer invariant: every locally normalized configuration has a
/// log-domain total of zero, within 1e-6, across the full sweep grid.
pub fn z1_suite(seeds: usize) -> Result<SuiteReport> {
    let mut cases = 0;
    let mut max_abs = 0.0f64;
    let mut failures = 0;
    for frames in 1..=6 {
        for lattice in sweep_lattices(frames) {
            for order in 0..=2 {
                for vocab in [2usize, 5] {
                    for (ni, norm) in [Normalization::LocalSoftmax, Normalization::LocalHat]
                        .into_iter()
                        .enumerate()
                    {
                        for seed in 0..seeds {
                            let fx = instance(
                                order,
                                vocab,
                                frames,
                                seed,
                                hash_case(&[frames, order, vocab, ni, seed]),
                            );
                            let omega = fx.omega(norm);
                            let (z, _) = inference::shortest_distance(
                                &lattice,
                                &omega,
                                LatticeMode::Plain,
                                Semiring::Log,
                            )?;
                            cases += 1;
                            max_abs = max_abs.max(z.abs());
                            if z.abs() > 1e-6 {
                                failures += 1;
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(SuiteReport {
        name: "unit-normalizer",
        passed: failures == 0,
        cases,
        max_error: max_abs,
        detail: if failures > 0 {
            format!("{failures} configurations off zero")
        } else {
            String::new()
        },
    })
}

fn hash_case(parts: &[usize]) -> u64 {
    let mut h = 0xcbf29ce484222325u64;
    for &p in parts {
        h ^= p as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

/// Brute-force equivalence: vectorized denominator, numerator, and best
/// path against the explicit lattice, across the sweep grid with global
/// normalization included. Values to 1e-9 relative; decoded labels exact up
/// to documented tie-breaking (score-equal alternatives).
pub fn oracle_suite(seeds: usize) -> Result<SuiteReport> {
    const ENUM_CAP: usize = 200_000;
    let mut cases = 0;
    let mut max_err = 0.0f64;
    let mut failures = Vec::new();
    let norms = [
        Normalization::Global,
        Normalization::LocalSoftmax,
        Normalization::LocalHat,
    ];
    for frames in 1..=6 {
        for lattice in sweep_lattices(frames) {
            for order in 0..=2 {
                for vocab in [2usize, 3, 5] {
                    for (ni, norm) in norms.into_iter().enumerate() {
                        for seed in 0..seeds {
                            let fx = instance(
                                order,
                                vocab,
                                frames,
                                seed,
                                hash_case(&[7, frames, order, vocab, ni, seed]),
                            );
                            let omega = fx.omega(norm);
                            let explicit =
                                build_explicit(&lattice, &fx.ctx, &omega, LatticeMode::Plain)?;
                            let enumerable = lattice.count_paths(vocab)? <= ENUM_CAP as u128;

                            // Denominator.
                            let oracle_den = if enumerable {
                                explicit.weight_by_enumeration(Semiring::Log, ENUM_CAP)?
                            } else {
                                explicit.weight_by_dp(Semiring::Log)
                            };
                            let (den, _) = inference::shortest_distance(
                                &lattice,
                                &omega,
                                LatticeMode::Plain,
                                Semiring::Log,
                            )?;
                            let err = (den - oracle_den).abs() / (1.0 + oracle_den.abs());
                            max_err = max_err.max(err);
                            cases += 1;
                            if err > 1e-9 {
                                failures.push(format!(
                                    "den {lattice:?} o{order} v{vocab} {norm:?} s{seed}: {err:.2e}"
                                ));
                            }

                            // Numerator for a random target.
                            let mut rng = ChaCha8Rng::seed_from_u64(hash_case(&[
                                99, frames, order, vocab, ni, seed,
                            ]));
                            let len = rng.gen_range(0..=3usize);
                            let target: Vec<usize> =
                                (0..len).map(|_| rng.gen_range(0..vocab)).collect();
                            if enumerable {
                                let oracle_num =
                                    explicit.string_weight(Semiring::Log, &target, ENUM_CAP)?;
                                let num = inference::numerator(
                                    &lattice,
                                    &omega,
                                    LatticeMode::Plain,
                                    &target,
                                    Semiring::Log,
                                )?;
                                let err = if num == oracle_num {
                                    0.0
                                } else {
                                    (num - oracle_num).abs() / (1.0 + oracle_num.abs())
                                };
                                max_err = max_err.max(err);
                                cases += 1;
                                if err > 1e-9 {
                                    failures.push(format!(
                                        "num {lattice:?} o{order} v{vocab} {norm:?} s{seed}: {err:.2e}"
                                    ));
                                }
                            }

                            // Best path.
                            let (labels, score) =
                                inference::decode_max_path(&lattice, &omega, LatticeMode::Plain)?;
                            let (oracle_labels, oracle_score) = explicit.best_path_by_dp();
                            let err = (score - oracle_score).abs() / (1.0 + oracle_score.abs());
                            max_err = max_err.max(err);
                            cases += 1;
                            if err > 1e-9 {
                                failures.push(format!(
                                    "decode score {lattice:?} o{order} v{vocab} {norm:?} s{seed}"
                                ));
                            } else if labels != oracle_labels && err > 0.0 {
                                // Equal-score alternatives are legitimate
                                // tie-break differences; unequal scores with
                                // different labels are not.
                                failures.push(format!(
                                    "decode labels {lattice:?} o{order} v{vocab} {norm:?} s{seed}"
                                ));
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(SuiteReport {
        name: "oracle-equivalence",
        passed: failures.is_empty(),
        cases,
        max_error: max_err,
        detail: failures.first().cloned().unwrap_or_default(),
    })
}

/// Central finite differences against the analytic gradients for every
/// weight-function variant and normalization mode, up to 200 sampled
/// parameters per configuration, max relative error below 1e-4.
pub fn grad_suite(inject_fault: bool) -> Result<SuiteReport> {
    let mut cases = 0;
    let mut max_rel = 0.0f64;
    let mut failures = 0;
    let lattice = AlignmentLattice::frame(4);
    let target = [0usize, 2, 1];
    for which in 0..3 {
        for (ni, norm) in [
            Normalization::Global,
            Normalization::LocalSoftmax,
            Normalization::LocalHat,
        ]
        .into_iter()
        .enumerate()
        {
            let mut fx = instance(1, 3, 4, which, hash_case(&[13, which, ni]));
            let analytic = {
                let omega = fx.omega(norm);
                inference::loss_gradients(
                    &lattice,
                    &omega,
                    LatticeMode::Plain,
                    &target,
                    &fx.wf,
                    &fx.prepared,
                    &fx.h,
                )?
            };
            let mut grad_flat = analytic.wf_grad.flatten();
            if inject_fault && which == 0 && ni == 0 {
                grad_flat[0] += 1e-2;
            }
            let mut flat = fx.wf.flatten();
            let step = 1e-5;
            let checks = flat.len().min(200);
            let stride = (flat.len() / checks).max(1);
            for i in (0..flat.len()).step_by(stride) {
                let keep = flat[i];
                let mut eval = |v: f64| -> Result<f64> {
                    flat[i] = v;
                    fx.wf.load_flat(&flat)?;
                    let prepared = fx.wf.prepare(&fx.ctx)?;
                    let omega = OmegaTable::new(&fx.wf, &prepared, &fx.ctx, &fx.h, norm);
                    Ok(inference::loss(&lattice, &omega, LatticeMode::Plain, &target)?.loss)
                };
                let up = eval(keep + step)?;
                let down = eval(keep - step)?;
                flat[i] = keep;
                fx.wf.load_flat(&flat)?;
                let fd = (up - down) / (2.0 * step);
                let an = grad_flat[i];
                let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-4);
                max_rel = max_rel.max(rel);
                cases += 1;
                if rel > 1e-4 {
                    failures += 1;
                }
            }
        }
    }
    Ok(SuiteReport {
        name: "gradient-fd",
        passed: failures == 0,
        cases,
        max_error: max_rel,
        detail: if failures > 0 {
            format!("{failures} parameters out of tolerance")
        } else {
            String::new()
        },
    })
}

/// Dedup semantics: collapse examples, the reduced-state reachability
/// bound (exhaustive over small grids), and the partition of the dedup
/// denominator into string numerators.
pub fn dedup_suite() -> Result<SuiteReport> {
    let mut cases = 0;
    let mut max_err = 0.0f64;
    let mut failures = Vec::new();

    // Collapse examples.
    let abbc = [Some(0), Some(1), Some(1), Some(2)];
    if crate::dedup::ctc_collapse(&abbc) != vec![0, 1, 2] {
        failures.push("collapse abbc".to_string());
    }
    let abbeb = [Some(0), Some(1), Some(1), None, Some(1)];
    if crate::dedup::ctc_collapse(&abbeb) != vec![0, 1, 1] {
        failures.push("collapse with epsilon break".to_string());
    }
    cases += 2;

    // Reachability bound, exhaustive on the small grid.
    for order in 0..=2usize {
        for vocab in 2..=3usize {
            for frames in 1..=4usize {
                let ctx = ContextDependency::new(order, vocab)?;
                for lattice in [
                    AlignmentLattice::frame(frames),
                    AlignmentLattice::label_frame(frames, 2)?,
                    AlignmentLattice::label(frames),
                ] {
                    let reachable = crate::dedup::reachable_reduced_states(&lattice, &ctx);
                    let bound = 2 * lattice.num_states() * ctx.num_states();
                    cases += 1;
                    if reachable > bound {
                        failures.push(format!(
                            "reachability o{order} v{vocab} t{frames}: {reachable} > {bound}"
                        ));
                    }
                }
            }
        }
    }

    // Denominator partitions into string numerators (real domain, 1e-10).
    for order in 0..=1usize {
        for seed in 0..3u64 {
            let fx = instance(order, 2, 3, 0, 1000 + seed);
            let omega = fx.omega(Normalization::Global);
            let lattice = AlignmentLattice::frame(3);
            let explicit = build_explicit(&lattice, &fx.ctx, &omega, LatticeMode::Dedup)?;
            let paths = explicit.enumerate_paths(100_000)?;
            let mut strings: Vec<Vec<usize>> = paths.iter().map(|p| p.emitted.clone()).collect();
            strings.sort();
            strings.dedup();
            let mut total = 0.0;
            for y in &strings {
                let w =
                    inference::numerator(&lattice, &omega, LatticeMode::Dedup, y, Semiring::Log)?;
                total += (-w).exp();
            }
            let (den, _) =
                inference::shortest_distance(&lattice, &omega, LatticeMode::Dedup, Semiring::Log)?;
            let err = (total - (-den).exp()).abs() / (1.0 + total.abs());
            max_err = max_err.max(err);
            cases += 1;
            if err > 1e-10 {
                failures.push(format!("partition o{order} s{seed}: {err:.2e}"));
            }
        }
    }

    Ok(SuiteReport {
        name: "dedup",
        passed: failures.is_empty(),
        cases,
        max_error: max_err,
        detail: failures.first().cloned().unwrap_or_default(),
    })
}
