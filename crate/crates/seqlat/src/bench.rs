//! Wall-time and working-set measurements over the configuration grid:
//! context order x alignment lattice x weight function x normalization,
//! once for loss-plus-gradient and once for decoding.
//!
//! Absolute numbers are hardware-bound and informational; what the
//! acceptance checks pin down is direction only: larger contexts cost more,
//! the label-frame lattice costs at least as much as the frame lattice, and
//! global normalization costs at least as much as local normalization
//! (local training skips the denominator pass entirely).

use crate::alignment::AlignmentLattice;
use crate::config::{LatticeVariant, WeightVariant};
use crate::context::ContextDependency;
use crate::inference;
use crate::oracle::LatticeMode;
use crate::weights::{Normalization, OmegaTable, WeightFunction};
use crate::Result;
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::time::Instant;

#[derive(Debug, Clone, Copy)]
pub struct BenchSettings {
    pub frames: usize,
    pub vocab: usize,
    pub dim: usize,
    /// Timed repetitions per cell; the minimum is reported.
    pub reps: usize,
    pub seed: u64,
}

impl Default for BenchSettings {
    fn default() -> Self {
        BenchSettings {
            frames: 48,
            vocab: 8,
            dim: 16,
            reps: 5,
            seed: 1,
        }
    }
}

#[derive(Debug, Clone)]
pub struct BenchRow {
    pub order: usize,
    pub lattice: LatticeVariant,
    pub weight_fn: WeightVariant,
    pub normalization: Normalization,
    pub train_seconds: f64,
    pub decode_seconds: f64,
    /// Working-set proxy: peak f64 cells held by tables, score matrices,
    /// and gradient buffers.
    pub train_mem_f64: usize,
    pub decode_mem_f64: usize,
}

fn lattice_for(variant: LatticeVariant, frames: usize) -> AlignmentLattice {
    match variant {
        LatticeVariant::Frame => AlignmentLattice::frame(frames),
        LatticeVariant::LabelFrame => AlignmentLattice::label_frame(frames, 1).expect("k = 1"),
        LatticeVariant::Label => AlignmentLattice::label(frames),
    }
}

fn norm_name(n: Normalization) -> &'static str {
    match n {
        Normalization::Global => "global",
        Normalization::LocalSoftmax => "local",
        Normalization::LocalHat => "hat",
    }
}

fn wf_name(w: WeightVariant) -> &'static str {
    match w {
        WeightVariant::Unshared => "unshared",
        WeightVariant::SharedEmb => "shared-emb",
        WeightVariant::SharedRnn => "shared-rnn",
    }
}

fn lattice_name(l: LatticeVariant) -> &'static str {
    match l {
        LatticeVariant::Frame => "frame",
        LatticeVariant::LabelFrame => "label-frame",
        LatticeVariant::Label => "label",
    }
}

/// Run the benchmark grid.
pub fn run(settings: BenchSettings) -> Result<Vec<BenchRow>> {
    let mut rows = Vec::new();
    let target: Vec<usize> = {
        let mut rng = ChaCha8Rng::seed_from_u64(settings.seed);
        (0..settings.frames / 2)
            .map(|_| rng.gen_range(0..settings.vocab))
            .collect()
    };
    for order in [0usize, 1, 2] {
        for lattice_variant in [LatticeVariant::Frame, LatticeVariant::LabelFrame] {
            for weight_variant in [
                WeightVariant::Unshared,
                WeightVariant::SharedEmb,
                WeightVariant::SharedRnn,
            ] {
                for norm in [Normalization::LocalSoftmax, Normalization::Global] {
                    rows.push(bench_cell(
                        settings,
                        order,
                        lattice_variant,
                        weight_variant,
                        norm,
                        &target,
                    )?);
                }
            }
        }
    }
    Ok(rows)
}

fn bench_cell(
    settings: BenchSettings,
    order: usize,
    lattice_variant: LatticeVariant,
    weight_variant: WeightVariant,
    norm: Normalization,
    target: &[usize],
) -> Result<BenchRow> {
    let mut rng = ChaCha8Rng::seed_from_u64(settings.seed);
    let ctx = ContextDependency::new(order, settings.vocab)?;
    let wf = match weight_variant {
        WeightVariant::Unshared => {
            WeightFunction::unshared(&mut rng, ctx.num_states(), settings.vocab, settings.dim)
        }
        WeightVariant::SharedEmb => {
            WeightFunction::shared_emb(&mut rng, ctx.num_states(), settings.vocab, settings.dim)
        }
        WeightVariant::SharedRnn => {
            WeightFunction::shared_rnn(&mut rng, settings.vocab, settings.dim, settings.dim)
        }
    };
    let prepared = wf.prepare(&ctx)?;
    let h = Array2::from_shape_fn((settings.frames, settings.dim), |_| {
        rng.gen_range(-1.0..1.0)
    });
    let lattice = lattice_for(lattice_variant, settings.frames);

    let mut train_best = f64::INFINITY;
    for _ in 0..settings.reps {
        let omega = OmegaTable::new(&wf, &prepared, &ctx, &h, norm);
        let t0 = Instant::now();
        let grads = inference::loss_gradients(
            &lattice,
            &omega,
            LatticeMode::Plain,
            target,
            &wf,
            &prepared,
            &h,
        )?;
        std::hint::black_box(&grads.wf_grad);
        train_best = train_best.min(t0.elapsed().as_secs_f64());
    }

    let mut decode_best = f64::INFINITY;
    for _ in 0..settings.reps {
        let omega = OmegaTable::new(&wf, &prepared, &ctx, &h, norm);
        let t0 = Instant::now();
        let out = inference::decode_max_path(&lattice, &omega, LatticeMode::Plain)?;
        std::hint::black_box(&out);
        decode_best = decode_best.min(t0.elapsed().as_secs_f64());
    }

    // Working-set proxy in f64 cells.
    let nc = ctx.num_states();
    let na = lattice.num_states();
    let v = settings.vocab;
    let omega_cells = settings.frames * nc * (v + 1) * 2; // raw + normalized
    let numerator_tables = 2 * na * (target.len() + 1);
    let denominator_tables = 2 * na * nc;
    let grad_cells = wf.flatten().len() + settings.frames * settings.dim;
    let train_mem = omega_cells
        + numerator_tables
        + grad_cells
        + if norm.is_local() {
            0
        } else {
            denominator_tables
        };
    let decode_mem = omega_cells / 2 + 2 * na * nc;

    Ok(BenchRow {
        order,
        lattice: lattice_variant,
        weight_fn: weight_variant,
        normalization: norm,
        train_seconds: train_best,
        decode_seconds: decode_best,
        train_mem_f64: train_mem,
        decode_mem_f64: decode_mem,
    })
}

/// Render the grid as a fixed-width table.
pub fn table(rows: &[BenchRow]) -> String {
    use std::fmt::Write;
    let mut out = String::new();
    writeln!(
        out,
        "{:<6} {:<12} {:<11} {:<7} {:>12} {:>12} {:>12} {:>12}",
        "order",
        "lattice",
        "weight-fn",
        "norm",
        "train[ms]",
        "decode[ms]",
        "train[kB]",
        "decode[kB]"
    )
    .unwrap();
    for row in rows {
        writeln!(
            out,
            "{:<6} {:<12} {:<11} {:<7} {:>12.3} {:>12.3} {:>12.1} {:>12.1}",
            row.order,
            lattice_name(row.lattice),
            wf_name(row.weight_fn),
            norm_name(row.normalization),
            row.train_seconds * 1e3,
            row.decode_seconds * 1e3,
            row.train_mem_f64 as f64 * 8.0 / 1024.0,
            row.decode_mem_f64 as f64 * 8.0 / 1024.0,
        )
        .unwrap();
    }
    out
}

/// Directional observations pinned by the acceptance criteria. Sums over
/// matched cells keep single-cell timer noise out.
pub struct Monotonicity {
    pub order2_slower_than_order0: bool,
    pub label_frame_at_least_frame: bool,
    pub global_at_least_local_at_order2: bool,
}

pub fn monotonicity(rows: &[BenchRow]) -> Monotonicity {
    let sum = |pred: &dyn Fn(&BenchRow) -> bool, train_only: bool| -> f64 {
        rows.iter()
            .filter(|r| pred(r))
            .map(|r| r.train_seconds + if train_only { 0.0 } else { r.decode_seconds })
            .sum()
    };
    let order2 = sum(&|r| r.order == 2, false);
    let order0 = sum(&|r| r.order == 0, false);
    let label_frame = sum(&|r| r.lattice == LatticeVariant::LabelFrame, false);
    let frame = sum(&|r| r.lattice == LatticeVariant::Frame, false);
    let global2 = sum(
        &|r| r.order == 2 && r.normalization == Normalization::Global,
        true,
    );
    let local2 = sum(
        &|r| r.order == 2 && r.normalization == Normalization::LocalSoftmax,
        true,
    );
    Monotonicity {
        order2_slower_than_order0: order2 > order0,
        label_frame_at_least_frame: label_frame >= frame,
        global_at_least_local_at_order2: global2 >= local2,
    }
}
