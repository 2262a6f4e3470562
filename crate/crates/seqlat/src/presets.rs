//! Named configurations mapping familiar model families onto the lattice
//! framework, plus the independent dynamic programs used to cross-check
//! them.
//!
//! Each preset pins the (context order, alignment lattice, normalization,
//! dedup) quadruple:
//!
//! - `ce`: order 0, frame lattice without epsilon, local softmax over the
//!   labels — per-frame cross entropy.
//! - `ctc`: order 0, frame lattice with epsilon, dedup on, local softmax.
//! - `rnnt`: label-frame lattice with the per-frame cap set to the label
//!   budget, local softmax.
//! - `hat`: `rnnt` with the sigmoid-gated normalization.
//! - `las_bounded`: label-dependent lattice, local softmax.
//! - `gnat`: frame lattice, unconstrained scores with an explicit global
//!   normalizer.
//!
//! The transducer-family presets replace the unbounded history of the
//! originals with a finite context order; their losses equal the classic
//! grid recursions only when the order covers the whole target, which is
//! what the oracles here verify on small instances.

use crate::config::{
    ContextSection, EncoderSection, EncoderVariant, LatticeSection, LatticeVariant,
    NormalizationKind, RunConfig, TrainSection, WeightVariant, WeightsSection,
};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Preset {
    Ce,
    Ctc,
    Rnnt,
    Hat,
    LasBounded,
    Gnat,
}

impl Preset {
    pub fn parse(name: &str) -> Option<Preset> {
        match name {
            "ce" => Some(Preset::Ce),
            "ctc" => Some(Preset::Ctc),
            "rnnt" => Some(Preset::Rnnt),
            "hat" => Some(Preset::Hat),
            "las_bounded" => Some(Preset::LasBounded),
            "gnat" => Some(Preset::Gnat),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Preset::Ce => "ce",
            Preset::Ctc => "ctc",
            Preset::Rnnt => "rnnt",
            Preset::Hat => "hat",
            Preset::LasBounded => "las_bounded",
            Preset::Gnat => "gnat",
        }
    }

    pub fn all() -> [Preset; 6] {
        [
            Preset::Ce,
            Preset::Ctc,
            Preset::Rnnt,
            Preset::Hat,
            Preset::LasBounded,
            Preset::Gnat,
        ]
    }
}

/// Size knobs a preset expansion needs.
#[derive(Debug, Clone, Copy)]
pub struct PresetSizes {
    pub vocab: usize,
    pub frames: usize,
    /// Label budget: the per-frame cap for the transducer presets and the
    /// sequence bound for the label-dependent one.
    pub label_count: usize,
    /// Finite history order standing in for the unbounded history of the
    /// transducer and attention families.
    pub order: usize,
    pub dim: usize,
    pub hidden: usize,
    pub input_dim: usize,
    pub seed: u64,
}

impl Default for PresetSizes {
    fn default() -> Self {
        PresetSizes {
            vocab: 4,
            frames: 8,
            label_count: 4,
            order: 2,
            dim: 16,
            hidden: 16,
            input_dim: 6,
            seed: 1,
        }
    }
}

/// Expand a preset into a full run configuration.
pub fn expand(preset: Preset, sizes: PresetSizes) -> Result<RunConfig> {
    let order = match preset {
        Preset::Ce | Preset::Ctc => 0,
        _ => sizes.order,
    };
    let states = crate::context::num_states(order, sizes.vocab)?;
    if states > 200_000 {
        return Err(Error::SizeGuard(format!(
            "preset {} would need {states} context states",
            preset.name()
        )));
    }
    let lattice = match preset {
        Preset::Ce => LatticeSection {
            variant: LatticeVariant::Frame,
            frames: sizes.frames,
            max_labels: 0,
            labels_per_frame: 1,
            epsilon: false,
            dedup: false,
        },
        Preset::Ctc => LatticeSection {
            variant: LatticeVariant::Frame,
            frames: sizes.frames,
            max_labels: 0,
            labels_per_frame: 1,
            epsilon: true,
            dedup: true,
        },
        Preset::Rnnt | Preset::Hat => LatticeSection {
            variant: LatticeVariant::LabelFrame,
            frames: sizes.frames,
            max_labels: 0,
            labels_per_frame: sizes.label_count.max(1),
            epsilon: true,
            dedup: false,
        },
        Preset::LasBounded => LatticeSection {
            variant: LatticeVariant::Label,
            frames: sizes.frames,
            // Bound generous enough for any target of the bundled tasks.
            max_labels: sizes.label_count.max(sizes.frames),
            labels_per_frame: 1,
            epsilon: true,
            dedup: false,
        },
        Preset::Gnat => LatticeSection {
            variant: LatticeVariant::Frame,
            frames: sizes.frames,
            max_labels: 0,
            labels_per_frame: 1,
            epsilon: true,
            dedup: false,
        },
    };
    let normalization = match preset {
        Preset::Hat => NormalizationKind::LocalHat,
        Preset::Gnat => NormalizationKind::Global,
        _ => NormalizationKind::LocalSoftmax,
    };
    let encoder = match preset {
        // The streaming and non-streaming variants of each family exist;
        // these defaults follow each family's usual description.
        Preset::Ce | Preset::Ctc | Preset::Gnat => EncoderVariant::CausalRnn,
        Preset::Rnnt | Preset::Hat | Preset::LasBounded => EncoderVariant::BidirRnn,
    };
    Ok(RunConfig {
        seed: sizes.seed,
        vocab: sizes.vocab,
        context: ContextSection { order },
        lattice,
        weights: WeightsSection {
            variant: WeightVariant::Unshared,
            normalization,
            dim: sizes.dim,
            hidden: sizes.hidden,
        },
        encoder: EncoderSection {
            variant: encoder,
            input_dim: sizes.input_dim,
        },
        train: TrainSection {
            // Without epsilon arcs, every frame must carry a label; only
            // the late-evidence task supplies that.
            task: match preset {
                Preset::Ce => crate::config::TaskKind::LateEvidence,
                _ => crate::config::TaskKind::Easy,
            },
            ..TrainSection::default()
        },
    })
}

// ---------------------------------------------------------------------------
// Independent oracles
// ---------------------------------------------------------------------------

/// Local factorization used by the grid oracle.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GridNorm {
    Softmax,
    /// Sigmoid-gated: `p(eps) = sigmoid(s_eps)`,
    /// `p(y) = (1 - sigmoid(s_eps)) * softmax_labels(s)[y]`.
    Hat,
}

fn grid_probs(raw: &[f64], norm: GridNorm, capped: bool) -> Vec<f64> {
    let v = raw.len() - 1;
    let mut p = vec![0.0; v + 1];
    if capped {
        // Only the epsilon arc exists; masked normalization gives it all
        // the mass.
        p[v] = 1.0;
        return p;
    }
    match norm {
        GridNorm::Softmax => {
            let m = raw.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = raw.iter().map(|s| (s - m).exp()).sum();
            for y in 0..=v {
                p[y] = (raw[y] - m).exp() / z;
            }
        }
        GridNorm::Hat => {
            let sig = 1.0 / (1.0 + (-raw[v]).exp());
            p[v] = sig;
            let m = raw[..v].iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = raw[..v].iter().map(|s| (s - m).exp()).sum();
            for y in 0..v {
                p[y] = (1.0 - sig) * (raw[y] - m).exp() / z;
            }
        }
    }
    p
}

/// Classic transducer grid recursion with the per-frame label cap: forward
/// probabilities over (frames consumed, labels emitted, consecutive labels
/// in the current frame). `raw(t, prefix)` returns the `vocab + 1` raw
/// scores at frame `t` after emitting `prefix` (epsilon last). Returns the
/// negative log probability of the target.
pub fn transducer_grid_loss(
    frames: usize,
    per_frame_cap: usize,
    vocab: usize,
    target: &[usize],
    norm: GridNorm,
    raw: &dyn Fn(usize, &[usize]) -> Vec<f64>,
) -> f64 {
    let t_max = frames;
    let u_max = target.len();
    let k = per_frame_cap;
    // alpha[t][u][n]
    let mut alpha = vec![vec![vec![0.0f64; k + 1]; u_max + 1]; t_max + 1];
    alpha[0][0][0] = 1.0;
    for t in 0..=t_max {
        for u in 0..=u_max {
            for n in 0..=k {
                let a = alpha[t][u][n];
                if a == 0.0 || t == t_max {
                    continue;
                }
                let scores = raw(t, &target[..u]);
                debug_assert_eq!(scores.len(), vocab + 1);
                let p = grid_probs(&scores, norm, n == k);
                // Epsilon advances the frame and resets the run length.
                alpha[t + 1][u][0] += a * p[vocab];
                // The next target label extends the run within this frame.
                if u < u_max && n < k {
                    alpha[t][u + 1][n + 1] += a * p[target[u]];
                }
            }
        }
    }
    -alpha[t_max][u_max][0].ln()
}

/// Textbook CTC forward pass over the blank-extended target. `probs[t]` is
/// the local distribution over `vocab + 1` symbols at frame `t`, blank
/// last. Returns the negative log probability of the target.
pub fn ctc_forward_loss(probs: &[Vec<f64>], vocab: usize, target: &[usize]) -> f64 {
    let frames = probs.len();
    let blank = vocab;
    // Extended sequence: blank y1 blank y2 ... blank.
    let mut ext = vec![blank];
    for &y in target {
        ext.push(y);
        ext.push(blank);
    }
    let s_len = ext.len();
    if frames == 0 {
        return if target.is_empty() {
            0.0
        } else {
            f64::INFINITY
        };
    }
    let mut alpha = vec![0.0f64; s_len];
    alpha[0] = probs[0][ext[0]];
    if s_len > 1 {
        alpha[1] = probs[0][ext[1]];
    }
    for t in 1..frames {
        let mut next = vec![0.0f64; s_len];
        for s in 0..s_len {
            let mut a = alpha[s];
            if s >= 1 {
                a += alpha[s - 1];
            }
            if s >= 2 && ext[s] != blank && ext[s] != ext[s - 2] {
                a += alpha[s - 2];
            }
            next[s] = a * probs[t][ext[s]];
        }
        alpha = next;
    }
    let total = alpha[s_len - 1] + if s_len > 1 { alpha[s_len - 2] } else { 0.0 };
    -total.ln()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::context::ContextDependency;
    use crate::inference;
    use crate::oracle::LatticeMode;
    use crate::semiring::Semiring;
    use crate::weights::{Normalization, OmegaTable, WeightFunction};
    use ndarray::Array2;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn expansions_match_their_quadruples() {
        let sizes = PresetSizes::default();
        let ce = expand(Preset::Ce, sizes).unwrap();
        assert_eq!(ce.context.order, 0);
        assert!(!ce.lattice.epsilon);
        assert!(!ce.lattice.dedup);
        assert_eq!(ce.weights.normalization, NormalizationKind::LocalSoftmax);

        let ctc = expand(Preset::Ctc, sizes).unwrap();
        assert_eq!(ctc.context.order, 0);
        assert!(ctc.lattice.epsilon);
        assert!(ctc.lattice.dedup);

        let rnnt = expand(Preset::Rnnt, sizes).unwrap();
        let hat = expand(Preset::Hat, sizes).unwrap();
        assert_eq!(rnnt.lattice.variant, LatticeVariant::LabelFrame);
        assert_eq!(rnnt.lattice.labels_per_frame, sizes.label_count);
        // The gated normalization is the only difference.
        let mut rnnt_like_hat = rnnt.clone();
        rnnt_like_hat.weights.normalization = NormalizationKind::LocalHat;
        assert_eq!(rnnt_like_hat, hat);

        let las = expand(Preset::LasBounded, sizes).unwrap();
        assert_eq!(las.lattice.variant, LatticeVariant::Label);
        assert_eq!(las.lattice.max_labels, sizes.label_count.max(sizes.frames));

        let gnat = expand(Preset::Gnat, sizes).unwrap();
        assert_eq!(gnat.weights.normalization, NormalizationKind::Global);
    }

    #[test]
    fn ce_lattice_has_no_epsilon_arcs() {
        let config = expand(Preset::Ce, PresetSizes::default()).unwrap();
        let lattice = config.build_lattice(4).unwrap();
        for q in lattice.states_topo() {
            assert!(lattice.epsilon_successor(q).is_none());
            if !lattice.is_final(q) {
                assert!(lattice.label_successor(q).is_some());
            }
        }
    }

    #[test]
    fn preset_guard_rejects_huge_contexts() {
        let sizes = PresetSizes {
            vocab: 32,
            order: 5,
            ..PresetSizes::default()
        };
        assert!(matches!(
            expand(Preset::Rnnt, sizes),
            Err(Error::SizeGuard(_))
        ));
    }

    /// Random weight function plus the suffix-truncating context lookup,
    /// packaged for the grid oracle.
    struct GridFixture {
        ctx: ContextDependency,
        wf: WeightFunction,
        prepared: crate::weights::PreparedWeights,
        h: Array2<f64>,
    }

    impl GridFixture {
        fn new(order: usize, vocab: usize, frames: usize, seed: u64) -> Self {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let ctx = ContextDependency::new(order, vocab).unwrap();
            let wf = WeightFunction::unshared(&mut rng, ctx.num_states(), vocab, 3);
            let prepared = wf.prepare(&ctx).unwrap();
            let h = Array2::from_shape_fn((frames.max(1), 3), |_| rng.gen_range(-1.0..1.0));
            GridFixture {
                ctx,
                wf,
                prepared,
                h,
            }
        }

        fn raw_closure(&self) -> impl Fn(usize, &[usize]) -> Vec<f64> + '_ {
            move |t, prefix| {
                let start = prefix.len().saturating_sub(self.ctx.order());
                let row = self.ctx.state_index(&prefix[start..]).unwrap();
                let scores = self.wf.raw_scores(&self.prepared, &self.h.row(t), &[row]);
                scores.row(0).to_vec()
            }
        }
    }

    #[test]
    fn rnnt_loss_matches_grid_recursion() {
        // Order covers the whole target, so the finite context is exact.
        for seed in 0..5 {
            let frames = 3;
            let target = [0usize, 1];
            let fx = GridFixture::new(2, 2, frames, seed);
            let cap = target.len();
            let lattice = crate::alignment::AlignmentLattice::label_frame(frames, cap).unwrap();
            let omega = OmegaTable::new(
                &fx.wf,
                &fx.prepared,
                &fx.ctx,
                &fx.h,
                Normalization::LocalSoftmax,
            );
            let got = inference::loss(&lattice, &omega, LatticeMode::Plain, &target)
                .unwrap()
                .loss;
            let want = transducer_grid_loss(
                frames,
                cap,
                2,
                &target,
                GridNorm::Softmax,
                &fx.raw_closure(),
            );
            assert!(
                (got - want).abs() < 1e-9 * (1.0 + want.abs()),
                "seed {seed}: {got} vs {want}"
            );
        }
    }

    #[test]
    fn hat_loss_matches_gated_grid_recursion() {
        for seed in 0..5 {
            let frames = 3;
            let target = [1usize, 0, 0];
            let fx = GridFixture::new(3, 2, frames, seed);
            let cap = target.len();
            let lattice = crate::alignment::AlignmentLattice::label_frame(frames, cap).unwrap();
            let omega = OmegaTable::new(
                &fx.wf,
                &fx.prepared,
                &fx.ctx,
                &fx.h,
                Normalization::LocalHat,
            );
            let got = inference::loss(&lattice, &omega, LatticeMode::Plain, &target)
                .unwrap()
                .loss;
            let want =
                transducer_grid_loss(frames, cap, 2, &target, GridNorm::Hat, &fx.raw_closure());
            assert!(
                (got - want).abs() < 1e-9 * (1.0 + want.abs()),
                "seed {seed}: {got} vs {want}"
            );
        }
    }

    #[test]
    fn empty_target_is_a_product_of_blanks() {
        let frames = 4;
        let fx = GridFixture::new(2, 2, frames, 9);
        let raw = fx.raw_closure();
        let want = transducer_grid_loss(frames, 1, 2, &[], GridNorm::Softmax, &raw);
        // Closed form: one path of epsilon probabilities at the empty
        // context.
        let mut expect = 0.0;
        for t in 0..frames {
            let scores = raw(t, &[]);
            let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = scores.iter().map(|s| (s - m).exp()).sum();
            expect -= ((scores[2] - m).exp() / z).ln();
        }
        assert!((want - expect).abs() < 1e-12);
    }

    #[test]
    fn ctc_preset_loss_matches_textbook_forward() {
        for seed in 0..5 {
            let frames = 4;
            let vocab = 3;
            let fx = GridFixture::new(0, vocab, frames, 20 + seed);
            let omega = OmegaTable::new(
                &fx.wf,
                &fx.prepared,
                &fx.ctx,
                &fx.h,
                Normalization::LocalSoftmax,
            );
            let lattice = crate::alignment::AlignmentLattice::frame(frames);
            // Per-frame distributions computed straight from raw scores.
            let raw = fx.raw_closure();
            let probs: Vec<Vec<f64>> = (0..frames)
                .map(|t| {
                    let s = raw(t, &[]);
                    let m = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let z: f64 = s.iter().map(|x| (x - m).exp()).sum();
                    s.iter().map(|x| (x - m).exp() / z).collect()
                })
                .collect();
            for target in [vec![0usize], vec![0, 0], vec![0, 1, 1], vec![2, 2, 0]] {
                let want = ctc_forward_loss(&probs, vocab, &target);
                let got = match inference::loss(&lattice, &omega, LatticeMode::Dedup, &target) {
                    Ok(res) => res.loss,
                    Err(Error::UnreachableTarget) => f64::INFINITY,
                    Err(e) => panic!("{e}"),
                };
                let ok = (got == want) || (got - want).abs() < 1e-9 * (1.0 + want.abs());
                assert!(ok, "seed {seed} {target:?}: {got} vs {want}");
            }
        }
    }

    #[test]
    fn ce_preset_loss_is_per_frame_cross_entropy() {
        for seed in 0..5 {
            let frames = 4;
            let vocab = 3;
            let fx = GridFixture::new(0, vocab, frames, 30 + seed);
            let omega = OmegaTable::new(
                &fx.wf,
                &fx.prepared,
                &fx.ctx,
                &fx.h,
                Normalization::LocalSoftmax,
            );
            let lattice = crate::alignment::AlignmentLattice::Frame {
                frames,
                epsilon: false,
            };
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let target: Vec<usize> = (0..frames).map(|_| rng.gen_range(0..vocab)).collect();
            let got = inference::loss(&lattice, &omega, LatticeMode::Plain, &target)
                .unwrap()
                .loss;
            // Direct sum of per-frame log softmax over the labels only.
            let raw = fx.raw_closure();
            let mut want = 0.0;
            for (t, &y) in target.iter().enumerate() {
                let s = raw(t, &[]);
                let m = s[..vocab].iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = s[..vocab].iter().map(|x| (x - m).exp()).sum();
                want -= (s[y] - m) - z.ln();
            }
            assert!(
                (got - want).abs() < 1e-12 * (1.0 + want.abs()),
                "seed {seed}: {got} vs {want}"
            );
        }
    }

    #[test]
    fn ce_preset_has_one_path_per_sequence() {
        let config = expand(
            Preset::Ce,
            PresetSizes {
                vocab: 2,
                frames: 3,
                ..PresetSizes::default()
            },
        )
        .unwrap();
        let lattice = config.build_lattice(3).unwrap();
        assert_eq!(lattice.count_paths(2).unwrap(), 8);
        // Every path emits a distinct length-3 sequence.
        let fx = GridFixture::new(0, 2, 3, 40);
        let omega = OmegaTable::new(
            &fx.wf,
            &fx.prepared,
            &fx.ctx,
            &fx.h,
            Normalization::LocalSoftmax,
        );
        let explicit =
            crate::oracle::build_explicit(&lattice, &fx.ctx, &omega, LatticeMode::Plain).unwrap();
        let paths = explicit.enumerate_paths(100).unwrap();
        let mut emitted: Vec<_> = paths.iter().map(|p| p.emitted.clone()).collect();
        emitted.sort();
        emitted.dedup();
        assert_eq!(emitted.len(), 8);
    }

    #[test]
    fn analytic_gradients_match_grid_oracle_differences() {
        // Cross-oracle route: finite differences of the independent grid
        // recursion against the lattice's analytic gradients. Valid because
        // the two losses agree to 1e-9 on these instances.
        let frames = 3;
        let vocab = 2;
        let target = [0usize, 1];
        let mut fx = GridFixture::new(2, vocab, frames, 77);
        let cap = target.len();
        let lattice = crate::alignment::AlignmentLattice::label_frame(frames, cap).unwrap();
        let analytic = {
            let omega = OmegaTable::new(
                &fx.wf,
                &fx.prepared,
                &fx.ctx,
                &fx.h,
                Normalization::LocalSoftmax,
            );
            inference::loss_gradients(
                &lattice,
                &omega,
                LatticeMode::Plain,
                &target,
                &fx.wf,
                &fx.prepared,
                &fx.h,
            )
            .unwrap()
        };
        let grad = analytic.wf_grad.flatten();
        let mut flat = fx.wf.flatten();
        let step = 1e-5;
        for i in (0..flat.len()).step_by(7) {
            let keep = flat[i];
            let mut eval = |v: f64| {
                flat[i] = v;
                fx.wf.load_flat(&flat).unwrap();
                fx.prepared = fx.wf.prepare(&fx.ctx).unwrap();
                transducer_grid_loss(
                    frames,
                    cap,
                    vocab,
                    &target,
                    GridNorm::Softmax,
                    &fx.raw_closure(),
                )
            };
            let fd = (eval(keep + step) - eval(keep - step)) / (2.0 * step);
            flat[i] = keep;
            fx.wf.load_flat(&flat).unwrap();
            fx.prepared = fx.wf.prepare(&fx.ctx).unwrap();
            let rel = (fd - grad[i]).abs() / fd.abs().max(grad[i].abs()).max(1e-4);
            assert!(
                rel < 1e-4,
                "param {i}: grid fd {fd} vs analytic {}",
                grad[i]
            );
        }
    }

    #[test]
    fn local_presets_inherit_unit_normalizer() {
        for preset in [
            Preset::Ce,
            Preset::Ctc,
            Preset::Rnnt,
            Preset::Hat,
            Preset::LasBounded,
        ] {
            let sizes = PresetSizes {
                vocab: 2,
                frames: 3,
                label_count: 2,
                order: 1,
                dim: 3,
                ..PresetSizes::default()
            };
            let config = expand(preset, sizes).unwrap();
            let ctx = config.build_context().unwrap();
            let model = config.build_model().unwrap();
            let prepared = model.wf.prepare(&ctx).unwrap();
            let h = Array2::from_shape_fn((3, config.weights.dim), |(i, j)| {
                ((i * 7 + j * 3) % 5) as f64 * 0.1 - 0.2
            });
            let omega = OmegaTable::new(&model.wf, &prepared, &ctx, &h, config.normalization());
            let lattice = config.build_lattice(3).unwrap();
            let (z, _) =
                inference::shortest_distance(&lattice, &omega, config.mode(), Semiring::Log)
                    .unwrap();
            assert!(z.abs() < 1e-6, "{}: {z}", preset.name());
        }
    }
}
